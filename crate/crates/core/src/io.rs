//! Text formatting shared by every CSV artifact.

/// 17 significant digits, locale independent.
pub fn fmt_real(x: f64) -> String {
    if x == 0.0 {
        // avoid "-0" vs "0" churn between otherwise identical runs
        return "0.0000000000000000e0".into();
    }
    format!("{x:.16e}")
}
