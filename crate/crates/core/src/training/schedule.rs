use crate::error::{invalid, Result};

/// Inverse-square-root schedule with linear warmup:
/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: usize, d_model: usize, warmup: usize) -> Result<f64> {
    if step == 0 || warmup == 0 || d_model == 0 {
        return Err(invalid("noam_lr needs step, warmup and d_model ≥ 1"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        // 512^-0.5 · 8000^-0.5 and 512^-0.5 · 8000^-1.5
        let peak = 1.0 / (512f64.sqrt() * 8000f64.sqrt());
        let first = 1.0 / (512f64.sqrt() * 8000f64.powf(1.5));
        assert!((noam_lr(8000, 512, 8000).unwrap() - peak).abs() < 1e-15);
        assert!((peak - 4.94e-4).abs() < 1e-6);
        assert!((noam_lr(1, 512, 8000).unwrap() - first).abs() < 1e-18);
        assert!((first - 6.18e-8).abs() < 1e-10);
        assert!(noam_lr(0, 512, 8000).is_err());
    }

    #[test]
    fn peak_at_warmup() {
        let w = 400;
        let peak = noam_lr(w, 64, w).unwrap();
        for s in 1..w {
            assert!(noam_lr(s, 64, w).unwrap() < noam_lr(s + 1, 64, w).unwrap());
        }
        for s in w..4 * w {
            assert!(noam_lr(s + 1, 64, w).unwrap() < noam_lr(s, 64, w).unwrap());
            assert!(noam_lr(s, 64, w).unwrap() <= peak);
        }
    }
}
