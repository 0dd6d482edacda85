use super::FlowField;
use crate::error::{invalid, Result};

fn check(pred: &FlowField, gt: &FlowField, valid: Option<&[bool]>) -> Result<usize> {
    if pred.extent() != gt.extent() {
        return Err(invalid(format!(
            "prediction {:?} and ground truth {:?} differ in extent",
            pred.extent(),
            gt.extent()
        )));
    }
    let n = pred.width() * pred.height();
    let count = match valid {
        Some(m) if m.len() != n => {
            return Err(invalid(format!("valid mask has {} entries, need {n}", m.len())))
        }
        Some(m) => m.iter().filter(|&&b| b).count(),
        None => n,
    };
    if count == 0 {
        return Err(invalid("no valid pixels to evaluate"));
    }
    Ok(count)
}

fn endpoint_errors<'a>(
    pred: &'a FlowField,
    gt: &'a FlowField,
    valid: Option<&'a [bool]>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    let (pu, pv, gu, gv) = (pred.u(), pred.v(), gt.u(), gt.v());
    (0..pu.len())
        .filter(move |&i| valid.is_none_or(|m| m[i]))
        .map(move |i| {
            let du = pu[i] as f64 - gu[i] as f64;
            let dv = pv[i] as f64 - gv[i] as f64;
            let mag = ((gu[i] as f64).powi(2) + (gv[i] as f64).powi(2)).sqrt();
            ((du * du + dv * dv).sqrt(), mag)
        })
}

/// Mean endpoint error over valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField, valid: Option<&[bool]>) -> Result<f64> {
    let count = check(pred, gt, valid)?;
    let total: f64 = endpoint_errors(pred, gt, valid).map(|(e, _)| e).sum();
    Ok(total / count as f64)
}

/// Fraction of valid pixels whose endpoint error exceeds 3 px and 5% of
/// the ground-truth magnitude.
pub fn fl_outlier_rate(pred: &FlowField, gt: &FlowField, valid: Option<&[bool]>) -> Result<f64> {
    let count = check(pred, gt, valid)?;
    let outliers = endpoint_errors(pred, gt, valid)
        .filter(|&(e, mag)| e > 3.0 && e > 0.05 * mag)
        .count();
    Ok(outliers as f64 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_zero() {
        let f = FlowField::from_fn(4, 4, |x, y| (x as f32, y as f32 - 2.0));
        assert_eq!(epe(&f, &f, None).unwrap(), 0.0);
        assert_eq!(fl_outlier_rate(&f, &f, None).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five() {
        let pred = FlowField::constant(3, 2, 3.0, 4.0);
        let gt = FlowField::zeros(3, 2);
        assert_eq!(epe(&pred, &gt, None).unwrap(), 5.0);
    }

    #[test]
    fn mixed_field_matches_scalar_loop() {
        let pred = FlowField::from_fn(5, 3, |x, y| ((x * y) as f32 * 0.3, x as f32 - 1.7));
        let gt = FlowField::from_fn(5, 3, |x, y| (y as f32, (x + y) as f32 * -0.4));
        let valid: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
        let mut sum = 0.0;
        let mut n = 0;
        for y in 0..3 {
            for x in 0..5 {
                if !valid[y * 5 + x] {
                    continue;
                }
                let (a, b) = pred.get(x, y);
                let (c, d) = gt.get(x, y);
                sum += ((a as f64 - c as f64).powi(2) + (b as f64 - d as f64).powi(2)).sqrt();
                n += 1;
            }
        }
        let got = epe(&pred, &gt, Some(&valid)).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn outlier_needs_both_thresholds() {
        let gt = FlowField::constant(2, 2, 100.0, 0.0);
        let pred = FlowField::constant(2, 2, 96.0, 0.0);
        assert_eq!(fl_outlier_rate(&pred, &gt, None).unwrap(), 0.0);
        let gt = FlowField::zeros(2, 2);
        let pred = FlowField::constant(2, 2, 4.0, 0.0);
        assert_eq!(fl_outlier_rate(&pred, &gt, None).unwrap(), 1.0);
    }

    #[test]
    fn empty_valid_set_is_rejected() {
        let f = FlowField::zeros(2, 2);
        assert!(epe(&f, &f, Some(&[false; 4])).is_err());
        assert!(fl_outlier_rate(&f, &f, Some(&[false; 4])).is_err());
        assert!(epe(&f, &FlowField::zeros(2, 3), None).is_err());
    }
}
