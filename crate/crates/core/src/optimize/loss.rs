use ndarray::{Array2, ArrayView, Dimension};

use crate::error::{invalid, Error, Result};
use crate::render::convolve;

/// Default DWA temperature.
pub const DWA_TEMPERATURE: f64 = 2.0;

fn check_dims<D: Dimension>(a: &ArrayView<f64, D>, b: &ArrayView<f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return invalid("empty arrays");
    }
    Ok(())
}

/// Mean squared difference.
pub fn loss_mse<D: Dimension>(pred: ArrayView<f64, D>, target: ArrayView<f64, D>) -> Result<f64> {
    check_dims(&pred, &target)?;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean absolute difference.
pub fn loss_l1<D: Dimension>(pred: ArrayView<f64, D>, target: ArrayView<f64, D>) -> Result<f64> {
    check_dims(&pred, &target)?;
    Ok(pred.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Cells inside the focus circle: diameter half the smaller window side, centred on the
/// chief landing cell `(rows / 2, cols / 2)`.
pub fn focus_region(dims: (usize, usize)) -> Array2<bool> {
    let radius = dims.0.min(dims.1) as f64 / 4.0;
    let (cr, cc) = ((dims.0 / 2) as f64, (dims.1 / 2) as f64);
    Array2::from_shape_fn(dims, |(i, j)| (i as f64 - cr).hypot(j as f64 - cc) <= radius)
}

fn check_normalized(psf: &Array2<f64>) -> Result<()> {
    let s = psf.sum();
    if !s.is_finite() {
        return Err(Error::NonFinite("PSF".into()));
    }
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized(s));
    }
    Ok(())
}

/// PSF mass outside the focus circle.
pub fn loss_focus(psf: &Array2<f64>) -> Result<f64> {
    check_normalized(psf)?;
    let o = focus_region(psf.dim());
    Ok(psf
        .iter()
        .zip(o.iter())
        .filter(|(_, &inside)| !inside)
        .map(|(v, _)| v)
        .sum())
}

/// `dL_focus / dPSF`.
pub fn loss_focus_grad(dims: (usize, usize)) -> Array2<f64> {
    focus_region(dims).mapv(|inside| if inside { 0.0 } else { 1.0 })
}

/// Fraction of energy inside the focus circle.
pub fn concentration(psf: &Array2<f64>) -> Result<f64> {
    Ok(1.0 - loss_focus(psf)?)
}

/// MSE between a target patch blurred by `psf` and the target itself, and its gradient
/// with respect to the PSF.
pub fn blur_mse(psf: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let blurred = convolve(target, psf)?;
    let resid = &blurred - target;
    let n = target.len() as f64;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let (r, c) = target.dim();
    let (kr, kc) = psf.dim();
    let (cr, cc) = ((kr / 2) as isize, (kc / 2) as isize);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let grad = Array2::from_shape_fn((kr, kc), |(a, b)| {
        let mut s = 0.0;
        for i in 0..r {
            let y = clamp(i as isize + cr - a as isize, r);
            for j in 0..c {
                s += resid[[i, j]] * target[[y, clamp(j as isize + cc - b as isize, c)]];
            }
        }
        2.0 * s / n
    });
    Ok((loss, grad))
}

/// Dynamic weight averaging. `history[w]` is the loss history of task `w`, oldest first.
/// Returns ones until every task has two entries.
pub fn dwa_weights(history: &[Vec<f64>], temperature: f64) -> Vec<f64> {
    let w = history.len();
    if w == 0 {
        return Vec::new();
    }
    if history.iter().any(|h| h.len() < 2) {
        return vec![1.0; w];
    }
    let ratios: Vec<f64> = history
        .iter()
        .map(|h| {
            let (prev, last) = (h[h.len() - 2], h[h.len() - 1]);
            if prev == 0.0 {
                1.0
            } else {
                last / prev
            }
        })
        .collect();
    let m = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = ratios.iter().map(|r| ((r - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| w as f64 * v / s).collect()
}

/// Static multipliers `c0..c3` for (mse, perceptual, L1, focus).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights(pub [f64; 4]);

impl LossWeights {
    /// Image reconstruction only: no depth head, no perceptual term.
    pub fn imaging() -> Self {
        Self([1.0, 0.0, 0.0, 1.0])
    }

    /// Joint image and depth: depth weighted 1, image and focus 0.05, no perceptual term.
    pub fn image_and_depth() -> Self {
        Self([0.05, 0.0, 1.0, 0.05])
    }

    pub fn focus_only() -> Self {
        Self([0.0, 0.0, 0.0, 1.0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_1: f64,
    pub l_focus: f64,
    /// Effective weights `c0..c3` (static times dynamic).
    pub weights: [f64; 4],
    pub total: f64,
}

/// `total = c0 L_mse + c1 * 0 + c2 L_1 + c3 L_focus` with `c_w = static_w * dynamic_w`;
/// the perceptual slot is carried but its loss is always zero.
pub fn total_loss(l_mse: f64, l_1: f64, l_focus: f64, fixed: LossWeights, dynamic: [f64; 4]) -> Result<LossReport> {
    for (name, v) in [("L_mse", l_mse), ("L_1", l_1), ("L_focus", l_focus)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    let c: [f64; 4] = std::array::from_fn(|i| fixed.0[i] * dynamic[i]);
    Ok(LossReport {
        l_mse,
        l_1,
        l_focus,
        weights: c,
        total: c[0] * l_mse + c[2] * l_1 + c[3] * l_focus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn mse_and_l1_cases() {
        let t = Array3::from_shape_fn((3, 4, 5), |(c, i, j)| (c + i * j) as f64 * 0.1);
        assert_eq!(loss_mse(t.view(), t.view()).unwrap(), 0.0);
        let p = t.mapv(|v| v + 0.1);
        assert!((loss_mse(p.view(), t.view()).unwrap() - 0.01).abs() < 1e-12);
        assert!((loss_l1(p.view(), t.view()).unwrap() - 0.1).abs() < 1e-12);
        assert!(loss_mse(t.view(), p.slice(ndarray::s![.., .., 0..4])).is_err());

        let a = Array2::from_shape_fn((7, 9), |(i, j)| ((i * 31 + j * 17) % 13) as f64 / 13.0);
        let b = Array2::from_shape_fn((7, 9), |(i, j)| ((i * 7 + j * 5) % 11) as f64 / 11.0);
        let (mut s2, mut s1) = (0.0, 0.0);
        for i in 0..7 {
            for j in 0..9 {
                s2 += (a[[i, j]] - b[[i, j]]).powi(2);
                s1 += (a[[i, j]] - b[[i, j]]).abs();
            }
        }
        assert!((loss_mse(a.view(), b.view()).unwrap() - s2 / 63.0).abs() < 1e-12);
        assert!((loss_l1(a.view(), b.view()).unwrap() - s1 / 63.0).abs() < 1e-12);
    }

    #[test]
    fn focus_cases() {
        let mut d = Array2::zeros((32, 32));
        d[[16, 16]] = 1.0;
        assert_eq!(loss_focus(&d).unwrap(), 0.0);
        let mut corner = Array2::zeros((32, 32));
        corner[[0, 31]] = 1.0;
        assert_eq!(loss_focus(&corner).unwrap(), 1.0);
        let u = Array2::from_elem((64, 64), 1.0 / 4096.0);
        let l = loss_focus(&u).unwrap();
        let want = 1.0 - std::f64::consts::PI / 16.0;
        assert!((l - want).abs() / want < 0.01, "{l}");
        assert!(matches!(loss_focus(&(u * 2.0)), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn dwa_cases() {
        assert_eq!(dwa_weights(&[vec![3.0, 2.0], vec![3.0, 2.0]], 2.0), vec![1.0, 1.0]);
        assert_eq!(dwa_weights(&[vec![3.0], vec![3.0]], 2.0), vec![1.0, 1.0]);
        let w = dwa_weights(&[vec![2.0, 1.0], vec![1.0, 1.0]], 2.0);
        assert!((w[0] - 0.8756).abs() < 1e-4 && (w[1] - 1.1244).abs() < 1e-4, "{w:?}");
        let w = dwa_weights(&[vec![0.0, 1.0], vec![1.0, 1.0]], 2.0);
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn total_cases() {
        let r = total_loss(0.0, 0.0, 0.0, LossWeights::imaging(), [1.0; 4]).unwrap();
        assert_eq!(r.total, 0.0);
        let r = total_loss(0.2, 0.3, 0.4, LossWeights::image_and_depth(), [1.0, 1.0, 0.5, 2.0]).unwrap();
        assert_eq!(r.weights, [0.05, 0.0, 0.5, 0.1]);
        assert!((r.total - (0.05 * 0.2 + 0.5 * 0.3 + 0.1 * 0.4)).abs() < 1e-12);
        assert_eq!(LossWeights::imaging().0[2], 0.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, LossWeights::imaging(), [1.0; 4]).is_err());
    }

    #[test]
    fn blur_mse_gradient_matches_differences() {
        let t = Array2::from_shape_fn((12, 10), |(i, j)| ((i * 5 + j * 3) % 7) as f64 / 7.0);
        let k = Array2::from_shape_fn((5, 4), |(a, b)| 0.05 + ((a + 2 * b) % 3) as f64 * 0.02);
        let (_, g) = blur_mse(&k, &t).unwrap();
        let eps = 1e-6;
        for (a, b) in [(0, 0), (2, 2), (4, 3), (1, 3)] {
            let mut kp = k.clone();
            kp[[a, b]] += eps;
            let mut km = k.clone();
            km[[a, b]] -= eps;
            let fd = (blur_mse(&kp, &t).unwrap().0 - blur_mse(&km, &t).unwrap().0) / (2.0 * eps);
            assert!((fd - g[[a, b]]).abs() < 1e-7, "{fd} vs {}", g[[a, b]]);
        }
    }

    proptest! {
        #[test]
        fn dwa_sums_to_task_count_and_ignores_scale(
            h in proptest::collection::vec((0.01f64..10.0, 0.01f64..10.0), 1..6),
            scale in 0.01f64..100.0,
        ) {
            let hist: Vec<Vec<f64>> = h.iter().map(|&(a, b)| vec![a, b]).collect();
            let w = dwa_weights(&hist, DWA_TEMPERATURE);
            prop_assert!((w.iter().sum::<f64>() - hist.len() as f64).abs() < 1e-9);
            let scaled: Vec<Vec<f64>> = hist.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let ws = dwa_weights(&scaled, DWA_TEMPERATURE);
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn focus_is_translation_invariant_inside_and_grows_outward(dr in -4isize..=4, dc in -4isize..=4, step in 1usize..8) {
            let n = 32;
            let mut a = Array2::zeros((n, n));
            a[[16, 16]] = 0.5;
            a[[17, 15]] = 0.5;
            let mut b = Array2::zeros((n, n));
            b[[(16 + dr) as usize, (16 + dc) as usize]] = 0.5;
            b[[(17 + dr) as usize, (15 + dc) as usize]] = 0.5;
            prop_assert_eq!(loss_focus(&a).unwrap(), loss_focus(&b).unwrap());
            // move one half of the mass outward along a row
            let mut prev = 0.0;
            for k in 0..=step {
                let mut m = Array2::zeros((n, n));
                m[[16, 16]] = 0.5;
                m[[16, (16 + 2 * k).min(n - 1)]] += 0.5;
                let l = loss_focus(&m).unwrap();
                prop_assert!(l >= prev);
                prev = l;
            }
        }
    }
}
