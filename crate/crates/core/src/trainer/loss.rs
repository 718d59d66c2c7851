//! Bradley-Terry preference loss and its analytic gradient through the
//! adapter's normalization and linear maps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scorer::{affine, dot, normalize, AdapterParams};

/// Examples per gradient shard. Shards are reduced in index order, so the
/// result does not depend on how many workers processed them.
const SHARD: usize = 16;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Probability that the positive is preferred: `sigmoid(s_pos - s_neg)`.
pub fn bt_probability(s_pos: f64, s_neg: f64) -> f64 {
    sigmoid(s_pos - s_neg)
}

/// `-ln p`.
pub fn nll_loss(p: f64) -> f64 {
    -p.ln()
}

/// `-ln sigmoid(s_pos - s_neg)`, evaluated as `softplus(s_neg - s_pos)`.
pub fn preference_nll(s_pos: f64, s_neg: f64) -> f64 {
    softplus(s_neg - s_pos)
}

/// One `(query, positive, negative)` training triple.
#[derive(Debug, Clone, Copy)]
pub struct TrainingExample<'a> {
    pub query_id: &'a str,
    pub x_img: &'a [f32],
    pub x_txt: &'a [f32],
    pub pos: &'a [f32],
    pub neg: &'a [f32],
}

/// Gradient of `y = x/|x|` pulled back to `x`: `(g - y (y.g)) / |x|`.
fn normalize_backward(y: &[f64], g: &[f64], norm: f64) -> Vec<f64> {
    let proj = dot(y, g);
    y.iter().zip(g).map(|(yi, gi)| (gi - yi * proj) / norm).collect()
}

/// Adds `rows[r] * x` to row `r` of `w`, where `x` is the concatenation of `parts`.
fn add_outer(w: &mut [f64], rows: &[f64], parts: &[&[f32]]) {
    let cols: usize = parts.iter().map(|p| p.len()).sum();
    for (r, &gr) in rows.iter().enumerate() {
        let row = &mut w[r * cols..(r + 1) * cols];
        let mut c = 0;
        for part in parts {
            for &x in *part {
                row[c] += gr * x as f64;
                c += 1;
            }
        }
    }
}

/// Accumulates the (un-averaged) gradient of one example into `grads` and
/// returns its loss.
fn accumulate_example(params: &AdapterParams, ex: &TrainingExample<'_>, grads: &mut AdapterParams) -> Result<f64> {
    for v in [ex.x_img, ex.x_txt, ex.pos, ex.neg] {
        if v.len() != params.d_in {
            return Err(Error::DimensionMismatch {
                expected: params.d_in,
                actual: v.len(),
            });
        }
    }
    let mut q = affine(&params.w_fuse, &params.b_fuse, &[ex.x_img, ex.x_txt]);
    let nq = normalize(&mut q).ok_or_else(|| Error::DegenerateQuery {
        query_id: ex.query_id.to_owned(),
    })?;
    let mut vp = affine(&params.w_img, &params.b_img, &[ex.pos]);
    let np = normalize(&mut vp).ok_or(Error::DegenerateImage)?;
    let mut vn = affine(&params.w_img, &params.b_img, &[ex.neg]);
    let nn = normalize(&mut vn).ok_or(Error::DegenerateImage)?;

    let inv_tau = params.inv_tau();
    let gap = inv_tau * (dot(&q, &vp) - dot(&q, &vn));
    let loss = softplus(-gap);
    // d loss / d gap
    let g = -sigmoid(-gap);

    let gq: Vec<f64> = vp.iter().zip(&vn).map(|(p, n)| g * inv_tau * (p - n)).collect();
    let gu = normalize_backward(&q, &gq, nq);
    let gvp: Vec<f64> = q.iter().map(|x| g * inv_tau * x).collect();
    let gvn: Vec<f64> = gvp.iter().map(|x| -x).collect();
    let ga = normalize_backward(&vp, &gvp, np);
    let gc = normalize_backward(&vn, &gvn, nn);

    add_outer(&mut grads.w_fuse, &gu, &[ex.x_img, ex.x_txt]);
    grads.b_fuse.iter_mut().zip(&gu).for_each(|(b, x)| *b += x);
    let d = params.d_in;
    for r in 0..params.d_out {
        let row = &mut grads.w_img[r * d..(r + 1) * d];
        for ((w, &p), &n) in row.iter_mut().zip(ex.pos).zip(ex.neg) {
            *w += ga[r] * p as f64 + gc[r] * n as f64;
        }
        grads.b_img[r] += ga[r] + gc[r];
    }
    grads.log_inv_tau += g * gap;
    Ok(loss)
}

fn add_into(acc: &mut AdapterParams, other: &AdapterParams) {
    for ((_, a), (_, b)) in acc.blocks_mut().into_iter().zip(other.blocks()) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

/// Mean loss over `batch` and its gradient with respect to every adapter
/// parameter, including the log inverse temperature.
pub fn loss_and_gradients(params: &AdapterParams, batch: &[TrainingExample<'_>]) -> Result<(f64, AdapterParams)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let shards: Vec<(f64, AdapterParams)> = batch
        .par_chunks(SHARD)
        .map(|shard| {
            let mut g = AdapterParams::zeros(params.d_in, params.d_out);
            let mut loss = 0.0;
            for ex in shard {
                loss += accumulate_example(params, ex, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;

    let mut shards = shards.into_iter();
    let (mut loss, mut grads) = shards.next().unwrap();
    for (l, g) in shards {
        loss += l;
        add_into(&mut grads, &g);
    }
    let n = batch.len() as f64;
    for (_, block) in grads.blocks_mut() {
        block.iter_mut().for_each(|x| *x /= n);
    }
    Ok((loss / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::scorer::{embed_image, fuse_query, relevance_score};
    use rand::Rng;

    #[test]
    fn probability_anchors() {
        assert_eq!(bt_probability(1.5, 1.5), 0.5);
        let p = bt_probability(100.0, 0.0);
        assert!(p >= 1.0 - 1e-40 && p.is_finite());
        assert!((bt_probability(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
        assert!(bt_probability(-800.0, 0.0).is_finite());
    }

    #[test]
    fn loss_anchors() {
        assert!((nll_loss(0.5) - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((preference_nll(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(preference_nll(1e6, 0.0) < 1e-300);
        assert!((preference_nll(0.0, 1.0) - 1.313_261_687_518_223).abs() < 1e-12);
        assert!(preference_nll(-1000.0, 0.0).is_finite());
    }

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn symmetric_pairs_have_zero_gradient() {
        let mut rng = stream_rng(11, &[]);
        let p = AdapterParams::identity_init(6, 5, 20.0, 0.1, &mut rng);
        let data: Vec<[Vec<f32>; 3]> = (0..5).map(|_| [rand_vec(&mut rng, 6), rand_vec(&mut rng, 6), rand_vec(&mut rng, 6)]).collect();
        let batch: Vec<_> = data
            .iter()
            .map(|[a, b, c]| TrainingExample { query_id: "q", x_img: a, x_txt: b, pos: c, neg: c })
            .collect();
        let (loss, g) = loss_and_gradients(&p, &batch).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_loss_is_mean_of_singletons() {
        let mut rng = stream_rng(12, &[]);
        let p = AdapterParams::identity_init(4, 4, 10.0, 0.1, &mut rng);
        let v: Vec<Vec<f32>> = (0..8).map(|_| rand_vec(&mut rng, 4)).collect();
        let a = TrainingExample { query_id: "a", x_img: &v[0], x_txt: &v[1], pos: &v[2], neg: &v[3] };
        let b = TrainingExample { query_id: "b", x_img: &v[4], x_txt: &v[5], pos: &v[6], neg: &v[7] };
        let (la, _) = loss_and_gradients(&p, &[a]).unwrap();
        let (lb, _) = loss_and_gradients(&p, &[b]).unwrap();
        let (lab, _) = loss_and_gradients(&p, &[a, b]).unwrap();
        assert!((lab - (la + lb) / 2.0).abs() < 1e-7);
    }

    #[test]
    fn loss_matches_forward_scoring() {
        let mut rng = stream_rng(13, &[]);
        let p = AdapterParams::identity_init(5, 3, 7.0, 0.2, &mut rng);
        let v: Vec<Vec<f32>> = (0..4).map(|_| rand_vec(&mut rng, 5)).collect();
        let ex = TrainingExample { query_id: "q", x_img: &v[0], x_txt: &v[1], pos: &v[2], neg: &v[3] };
        let q = fuse_query(&p, &v[0], &v[1]).unwrap();
        let sp = relevance_score(&p, &q, &embed_image(&p, &v[2]).unwrap());
        let sn = relevance_score(&p, &q, &embed_image(&p, &v[3]).unwrap());
        let (loss, _) = loss_and_gradients(&p, &[ex]).unwrap();
        assert!((loss - preference_nll(sp, sn)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_query_names_query() {
        let p = AdapterParams::zeros(2, 2);
        let z = [1.0f32, 1.0];
        let ex = TrainingExample { query_id: "q42", x_img: &z, x_txt: &z, pos: &z, neg: &z };
        match loss_and_gradients(&p, &[ex]) {
            Err(Error::DegenerateQuery { query_id }) => assert_eq!(query_id, "q42"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
