use super::tensor::Tensor;

/// Per-pixel softmax over channels.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let (c, h, w) = logits.dims();
    let n = h * w;
    let mut out = Tensor::zeros(c, h, w);
    let src = logits.data();
    let dst = out.data_mut();
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for ch in 0..c {
            mx = mx.max(src[ch * n + i]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (src[ch * n + i] - mx).exp();
            dst[ch * n + i] = e;
            sum += e;
        }
        for ch in 0..c {
            dst[ch * n + i] /= sum;
        }
    }
    out
}

/// Class-weighted per-pixel cross-entropy.
///
/// `targets` holds one class index per pixel; entries `>= channels` are
/// ignored. The loss is normalised by the summed weight of the valid pixels
/// (so unweighted it is the mean over valid pixels). Returns
/// `(loss, dloss/dlogits, total_weight)`; with no valid pixels the loss and
/// gradient are zero.
pub fn weighted_cross_entropy(logits: &Tensor, targets: &[u8], weights: &[f64]) -> (f64, Tensor, f64) {
    let (c, h, w) = logits.dims();
    let n = h * w;
    assert_eq!(targets.len(), n);
    assert_eq!(weights.len(), c);
    let probs = softmax_channels(logits);
    let p = probs.data();
    let mut grad = Tensor::zeros(c, h, w);
    let mut total_w = 0.0;
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= c {
            continue;
        }
        let wt = weights[t];
        total_w += wt;
        loss -= wt * p[t * n + i].max(1e-300).ln();
        let g = grad.data_mut();
        for ch in 0..c {
            let ind = if ch == t { 1.0 } else { 0.0 };
            g[ch * n + i] = wt * (p[ch * n + i] - ind);
        }
    }
    if total_w > 0.0 {
        loss /= total_w;
        grad.data_mut().iter_mut().for_each(|g| *g /= total_w);
    }
    (loss, grad, total_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_vec(3, 1, 2, vec![1000.0, -3.0, 0.0, 2.0, -1000.0, 5.0]).unwrap();
        let s = softmax_channels(&t);
        for i in 0..2 {
            let sum: f64 = (0..3).map(|c| s.get(c, 0, i)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::from_vec(2, 1, 3, vec![0.3, -1.2, 2.0, 0.1, 0.5, -0.7]).unwrap();
        let targets = [1u8, 0, 255];
        let weights = [2.0, 0.5];
        let (_, g, tw) = weighted_cross_entropy(&logits, &targets, &weights);
        assert_eq!(tw, 2.5);
        let eps = 1e-6;
        for i in 0..6 {
            let mut p = logits.clone();
            p.data_mut()[i] += eps;
            let mut m = logits.clone();
            m.data_mut()[i] -= eps;
            let fd = (weighted_cross_entropy(&p, &targets, &weights).0
                - weighted_cross_entropy(&m, &targets, &weights).0)
                / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
        // ignored pixel contributes nothing
        assert_eq!(g.get(0, 0, 2), 0.0);
        assert_eq!(g.get(1, 0, 2), 0.0);
    }
}
