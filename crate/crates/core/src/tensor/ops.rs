//! Raw kernels shared by the tape's forward and backward passes.

/// `c = beta * c + op(a) * op(b)` for row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. With `trans_a` the buffer `a` holds
/// a `k x m` matrix (likewise for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three buffers, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major strides of `shape`, with zero stride on axes where the operand
/// is broadcast to `out`.
fn broadcast_strides(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - operand.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..operand.len()).rev() {
        if operand[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= operand[i];
    }
    strides
}

/// For each flat index of `out`, the flat index into an operand of shape
/// `operand` that broadcasts to it. `None` when the shapes are equal.
pub(crate) fn operand_indices(operand: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if operand == out {
        return None;
    }
    let total: usize = out.iter().product();
    let n_op: usize = operand.iter().product();
    // An operand that is a suffix of `out` repeats every `n_op` entries.
    if operand.len() <= out.len() && out[out.len() - operand.len()..] == *operand {
        return Some((0..total).map(|i| i % n_op.max(1)).collect());
    }
    let strides = broadcast_strides(operand, out);
    let mut idx = vec![0usize; out.len()];
    let mut result = Vec::with_capacity(total);
    let mut flat = 0usize;
    for _ in 0..total {
        result.push(flat);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(result)
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1, 2], [3, 4]], b = [[5], [6]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = [0.0; 2];
        gemm(2, 2, 1, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [17.0, 39.0]);
        // aᵀ b = [[1*5 + 3*6], [2*5 + 4*6]]
        gemm(2, 2, 1, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [23.0, 34.0]);
    }

    #[test]
    fn broadcast_indices_general_case() {
        // [2, 1] broadcast against [2, 3]
        let idx = operand_indices(&[2, 1], &[2, 3]).unwrap();
        assert_eq!(idx, vec![0, 0, 0, 1, 1, 1]);
        let idx = operand_indices(&[3], &[2, 3]).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2]);
        let idx = operand_indices(&[1, 3], &[2, 2, 3]).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
        let idx = operand_indices(&[2, 1, 1], &[2, 2, 2]).unwrap();
        assert_eq!(idx, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert!(operand_indices(&[2, 3], &[2, 3]).is_none());
    }

    #[test]
    fn stable_scalar_functions() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(800.0).is_finite());
        assert!(sigmoid(-800.0) >= 0.0);
    }
}
