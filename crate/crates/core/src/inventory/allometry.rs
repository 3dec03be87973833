use crate::error::{Error, Result};

/// `DBH_cm = correction * exp(a + b ln(H_m * CD_m))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllometryConfig {
    pub a: f64,
    pub b: f64,
    pub correction: f64,
}

pub fn allometric_dbh(height_m: f64, crown_m: f64, cfg: &AllometryConfig) -> Result<f64> {
    if !(height_m > 0.0 && crown_m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "height and crown diameter must be positive, got {height_m} and {crown_m}"
        )));
    }
    if !(cfg.b > 0.0) {
        return Err(Error::InvalidArgument(format!("allometric exponent must be > 0, got {}", cfg.b)));
    }
    Ok(cfg.correction * (cfg.a + cfg.b * (height_m * crown_m).ln()).exp())
}

/// Log-log least squares with the `exp(s²/2)` back-transform correction.
pub fn fit_allometry(height_m: &[f64], crown_m: &[f64], dbh_cm: &[f64]) -> Result<AllometryConfig> {
    let n = dbh_cm.len();
    if n < 3 || height_m.len() != n || crown_m.len() != n {
        return Err(Error::InvalidArgument("need at least 3 complete samples".into()));
    }
    let xs: Vec<f64> = height_m.iter().zip(crown_m).map(|(h, c)| (h * c).ln()).collect();
    let ys: Vec<f64> = dbh_cm.iter().map(|d| d.ln()).collect();
    if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("allometry samples must be positive".into()));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all H·CD products are equal".into()));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let s2 = sse / (n as f64 - 2.0).max(1.0);
    Ok(AllometryConfig {
        a,
        b,
        correction: (s2 / 2.0).exp(),
    })
}
