//! Learning-curve smoothing for metrics files.

/// One row of a metrics file: epoch index and episodic reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub reward: f64,
}

/// Smoothed output row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub reward: f64,
    pub moving_average: f64,
}

/// Parse the `epoch,episodic_reward,...` CSV written by training. Errors
/// carry the 1-based line number.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if !line.starts_with("epoch,") {
                return Err(format!("line {lineno}: missing metrics header"));
            }
            continue;
        }
        let mut fields = line.split(',');
        let epoch = fields
            .next()
            .ok_or_else(|| format!("line {lineno}: empty row"))?
            .trim()
            .parse::<usize>()
            .map_err(|e| format!("line {lineno}: bad epoch: {e}"))?;
        let reward = fields
            .next()
            .ok_or_else(|| format!("line {lineno}: missing episodic_reward column"))?
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("line {lineno}: bad episodic_reward: {e}"))?;
        rows.push(MetricsRow { epoch, reward });
    }
    if rows.is_empty() {
        return Err("metrics file has no data rows".to_string());
    }
    Ok(rows)
}

/// Trailing moving average over `window` epochs, full windows only. When
/// the window exceeds the data, the curve collapses to a single point
/// whose moving average spans everything.
pub fn smooth(rows: &[MetricsRow], window: usize) -> Vec<CurvePoint> {
    assert!(window > 0, "window must be positive");
    if window > rows.len() {
        let last = rows[rows.len() - 1];
        let mean = rows.iter().map(|r| r.reward).sum::<f64>() / rows.len() as f64;
        return vec![CurvePoint {
            epoch: last.epoch,
            reward: last.reward,
            moving_average: mean,
        }];
    }
    (window - 1..rows.len())
        .map(|i| {
            let sum: f64 = rows[i + 1 - window..=i].iter().map(|r| r.reward).sum();
            CurvePoint {
                epoch: rows[i].epoch,
                reward: rows[i].reward,
                moving_average: sum / window as f64,
            }
        })
        .collect()
}

/// Least-squares slope of the smoothed values against the epoch index.
/// A single point has no trend: slope 0.
pub fn trend_slope(points: &[CurvePoint]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mean_x = points.iter().map(|p| p.epoch as f64).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.moving_average).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for p in points {
        let dx = p.epoch as f64 - mean_x;
        num += dx * (p.moving_average - mean_y);
        den += dx * dx;
    }
    num / den
}

pub fn to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,reward,moving_average\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.epoch, p.reward, p.moving_average));
    }
    out
}
