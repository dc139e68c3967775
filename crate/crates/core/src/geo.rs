//! Great-circle distance on a spherical Earth.

use crate::domain::{GeoPoint, EARTH_RADIUS_KM};

/// Haversine distance in kilometers between two points given in degrees.
///
/// Uses the mean Earth radius 6371.0 km. The half-angle term is clamped to
/// [0, 1] so rounding near antipodal points cannot produce a NaN, and the
/// deltas are taken as absolute values so that swapping the operands runs
/// the identical arithmetic.
pub fn haversine_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    const DEG_TO_RAD: f64 = std::f64::consts::PI / 180.0;
    let dlat = (b.lat - a.lat).abs() * DEG_TO_RAD;
    let dlon = (b.lon - a.lon).abs() * DEG_TO_RAD;
    let h = (dlat / 2.0).sin().powi(2)
        + (a.lat * DEG_TO_RAD).cos() * (b.lat * DEG_TO_RAD).cos() * (dlon / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    EARTH_RADIUS_KM * 2.0 * h.sqrt().atan2((1.0 - h).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn point(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn random_point(rng: &mut SplitMix64) -> GeoPoint {
        point(rng.uniform(-90.0, 90.0), rng.uniform(-180.0, 180.0))
    }

    #[test]
    fn zero_for_identical_points() {
        let p = point(40.7, -74.0);
        assert_eq!(haversine_km(&p, &p), 0.0);
        let mut rng = SplitMix64::new(1);
        for _ in 0..100 {
            let q = random_point(&mut rng);
            assert_eq!(haversine_km(&q, &q), 0.0);
        }
    }

    #[test]
    fn positive_for_distinct_points() {
        let a = point(0.0, 0.0);
        let b = point(0.0, 1e-6);
        assert!(haversine_km(&a, &b) > 0.0);
    }

    #[test]
    fn antipodal_is_half_circumference() {
        let a = point(0.0, 0.0);
        let b = point(0.0, 180.0);
        let expected = std::f64::consts::PI * EARTH_RADIUS_KM;
        let got = haversine_km(&a, &b);
        assert!(((got - expected) / expected).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn one_degree_along_equator() {
        // Along the equator one degree of longitude subtends R * pi / 180.
        let expected = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        let got = haversine_km(&point(0.0, 0.0), &point(0.0, 1.0));
        assert!(((got - expected) / expected).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn symmetric_exactly() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..10_000 {
            let a = random_point(&mut rng);
            let b = random_point(&mut rng);
            assert_eq!(haversine_km(&a, &b), haversine_km(&b, &a));
        }
    }

    #[test]
    fn triangle_inequality() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..10_000 {
            let a = random_point(&mut rng);
            let b = random_point(&mut rng);
            let c = random_point(&mut rng);
            let ab = haversine_km(&a, &b);
            let bc = haversine_km(&b, &c);
            let ac = haversine_km(&a, &c);
            assert!(ac <= ab + bc + 1e-9, "violated: {ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn monotone_in_longitude_along_equator() {
        let origin = point(0.0, 0.0);
        let mut last = 0.0;
        for i in 1..=180 {
            let d = haversine_km(&origin, &point(0.0, i as f64));
            assert!(d > last, "not monotone at {i} degrees");
            last = d;
        }
    }

    #[test]
    fn bounded_by_half_circumference() {
        let mut rng = SplitMix64::new(4);
        let bound = std::f64::consts::PI * EARTH_RADIUS_KM;
        for _ in 0..10_000 {
            let a = random_point(&mut rng);
            let b = random_point(&mut rng);
            let d = haversine_km(&a, &b);
            assert!(d >= 0.0 && d <= bound + 1e-9);
        }
    }
}
