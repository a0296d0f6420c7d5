use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, NumericsError};

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is numerically zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    /// (tensor, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Central-difference check of `analytic` against `f` on a seeded subsample
/// of at least `min_coords` coordinates (all of them if fewer exist).
///
/// Coordinates for which `frozen(tensor, index)` holds are not perturbed;
/// their numeric derivative is reported as 0.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &mut [Matrix],
    analytic: &[Matrix],
    frozen: &dyn Fn(usize, usize) -> bool,
    epsilon: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&[Matrix]) -> f64,
{
    if params.len() != analytic.len()
        || params
            .iter()
            .zip(analytic)
            .any(|(p, a)| p.shape() != a.shape())
    {
        return Err(NumericsError::Shape(
            "analytic gradients are not shape-congruent with parameters".into(),
        ));
    }
    let base = f(params);
    if !base.is_finite() {
        return Err(NumericsError::NonFinite(base));
    }
    let total: usize = params.iter().map(Matrix::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for t in 0..params.len() {
        let len = params[t].len();
        if len == 0 {
            continue;
        }
        let quota = if total <= min_coords {
            len
        } else {
            len.min((min_coords * len).div_ceil(total).max(3))
        };
        for idx in sample(&mut rng, len, quota).into_iter() {
            let a = analytic[t].data()[idx];
            let numeric = if frozen(t, idx) {
                0.0
            } else {
                let orig = params[t].data()[idx];
                params[t].data_mut()[idx] = orig + epsilon;
                let plus = f(params);
                params[t].data_mut()[idx] = orig - epsilon;
                let minus = f(params);
                params[t].data_mut()[idx] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(NumericsError::NonFinite(if plus.is_finite() {
                        minus
                    } else {
                        plus
                    }));
                }
                (plus - minus) / (2.0 * epsilon)
            };
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.coords_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((t, idx, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Masking, Tape};

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn check<B>(params: Vec<Matrix>, build: B) -> GradCheckReport
    where
        B: Fn(&mut Tape, &[crate::numerics::Var]) -> crate::numerics::Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let root = build(&mut tape, &vars);
        let mut grads = tape.backward(root).unwrap();
        let analytic: Vec<Matrix> = vars
            .iter()
            .zip(&params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect();
        let mut params = params;
        finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let vs: Vec<_> = ps.iter().map(|p| t.param(p.clone())).collect();
                let r = build(&mut t, &vs);
                t.value(r).get(0, 0)
            },
            &mut params,
            &analytic,
            &|_, _| false,
            1e-4,
            200,
            9,
        )
        .unwrap()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = Matrix::from_vec(3, 4, lcg(1, 12)).unwrap();
        let b = Matrix::from_vec(4, 2, lcg(2, 8)).unwrap();
        let w = Matrix::from_vec(3, 2, lcg(3, 6)).unwrap();
        let report = check(vec![a, b], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            let w = t.constant(w.clone());
            let c2 = t.matmul_nt(c, w).unwrap();
            t.sum(c2)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn sum_of_matmul_is_exact() {
        let a = Matrix::from_vec(3, 4, lcg(4, 12)).unwrap();
        let b = Matrix::from_vec(4, 2, lcg(5, 8)).unwrap();
        let report = check(vec![a, b], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            t.sum(c)
        });
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.coords_checked, 20);
    }

    #[test]
    fn layer_norm_gradient() {
        let x = Matrix::from_vec(4, 8, lcg(6, 32)).unwrap();
        let g = Matrix::from_vec(1, 8, lcg(7, 8)).unwrap();
        let b = Matrix::from_vec(1, 8, lcg(8, 8)).unwrap();
        let w = Matrix::from_vec(4, 8, lcg(9, 32)).unwrap();
        let report = check(vec![x, g, b], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            let w = t.constant(w.clone());
            let p = t.matmul_nt(y, w).unwrap();
            let p = t.relu(p);
            t.sum(p)
        });
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn softmax_attention_and_cross_entropy_gradients() {
        let q = Matrix::from_vec(6, 4, lcg(10, 24)).unwrap();
        let k = Matrix::from_vec(6, 4, lcg(11, 24)).unwrap();
        let v = Matrix::from_vec(6, 4, lcg(12, 24)).unwrap();
        let r = Matrix::from_vec(3, 3, lcg(13, 9)).unwrap();
        let bias = Matrix::from_vec(1, 4, lcg(14, 4)).unwrap();
        for masking in [Masking::Causal, Masking::CausalAfterSoftmax] {
            let report = check(
                vec![q.clone(), k.clone(), v.clone(), r.clone(), bias.clone()],
                |t, p| {
                    let s = t.attn_scores(p[0], p[1], 3, 2, 0.7).unwrap();
                    let a = t.softmax(s, masking).unwrap();
                    let o = t.attn_apply(a, p[2], 2, false).unwrap();
                    let shared = t.softmax(p[3], masking).unwrap();
                    let o2 = t.attn_apply(shared, o, 1, true).unwrap();
                    let o2 = t.add_row(o2, p[4]).unwrap();
                    t.cross_entropy(o2, vec![1, 2, 3, 1, 2, 3]).unwrap()
                },
            );
            assert!(report.max_rel_error < 1e-6, "{masking:?}: {report:?}");
        }
    }

    #[test]
    fn gather_tiled_and_masked_rows() {
        let table = Matrix::from_vec(5, 3, lcg(15, 15)).unwrap();
        let tile = Matrix::from_vec(2, 3, lcg(16, 6)).unwrap();
        let report = check(vec![table, tile], |t, p| {
            let g = t.gather(p[0], vec![1, 4, 1, 0]).unwrap();
            let g = t.add_tiled(g, p[1]).unwrap();
            let g = t.mask_rows(g, vec![true, true, false, true]).unwrap();
            let g = t.scale(g, 1.5);
            let sq = t.matmul_nt(g, g).unwrap();
            t.sum(sq)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn frozen_coordinates_report_zero() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut params = vec![a];
        let analytic = vec![Matrix::from_vec(2, 2, vec![0.0, 2.0, 2.0, 2.0]).unwrap()];
        // f = 2·(a01 + a10 + a11), a00 frozen
        let report = finite_diff_check(
            |p| 2.0 * (p[0].get(0, 1) + p[0].get(1, 0) + p[0].get(1, 1)) + 100.0 * p[0].get(0, 0),
            &mut params,
            &analytic,
            &|_, i| i == 0,
            1e-4,
            10,
            1,
        )
        .unwrap();
        assert!(report.max_abs_error < 1e-9, "{report:?}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut params = vec![Matrix::zeros(1, 1)];
        let analytic = vec![Matrix::zeros(1, 1)];
        let err = finite_diff_check(|_| f64::NAN, &mut params, &analytic, &|_, _| false, 1e-4, 1, 0);
        assert!(matches!(err, Err(NumericsError::NonFinite(_))));
    }
}
