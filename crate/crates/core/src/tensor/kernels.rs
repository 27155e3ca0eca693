//! Row-major matrix kernels. Loop orders keep the innermost loop contiguous.

/// Below this output width the kernels switch to formulations whose
/// innermost loop runs over `k` or `m` instead of `n`.
const NARROW: usize = 16;

fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// Four independent partial sums so the compiler can vectorize.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `out (m×n) += a (m×k) · b (k×n)`
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    if n < NARROW && k >= NARROW {
        let bt = transpose(k, n, b);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] += dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], row);
        }
    }
}

/// `out (m×k) += dc (m×n) · bᵀ` where `b` is `k×n`.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, n: usize, dc: &[f64], b: &[f64], out: &mut [f64]) {
    if n < NARROW {
        let bt = transpose(k, n, b);
        for i in 0..m {
            let orow = &mut out[i * k..(i + 1) * k];
            for j in 0..n {
                let d = dc[i * n + j];
                if d != 0.0 {
                    axpy(d, &bt[j * k..(j + 1) * k], orow);
                }
            }
        }
        return;
    }
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(drow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out (k×n) += aᵀ · dc` where `a` is `m×k` and `dc` is `m×n`.
pub(crate) fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], dc: &[f64], out: &mut [f64]) {
    if n < NARROW {
        let mut out_t = vec![0.0; n * k];
        for p in 0..m {
            let arow = &a[p * k..(p + 1) * k];
            for j in 0..n {
                let d = dc[p * n + j];
                if d != 0.0 {
                    axpy(d, arow, &mut out_t[j * k..(j + 1) * k]);
                }
            }
        }
        for i in 0..k {
            for j in 0..n {
                out[i * n + j] += out_t[j * k + i];
            }
        }
        return;
    }
    for p in 0..m {
        let drow = &dc[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            axpy(av, drow, &mut out[i * n..(i + 1) * n]);
        }
    }
}

/// Index map from an output element to its broadcast operand element.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// `j = (i / inner) % len`: the operand varies over one contiguous run
    /// of output axes.
    Strided { inner: usize, len: usize },
    Map(Vec<usize>),
}

impl Broadcast {
    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Strided { inner, len } => (i / inner) % len,
            Broadcast::Map(m) => m[i],
        }
    }
}

/// Picks the cheapest index rule for broadcasting `part` into `full`.
pub(crate) fn broadcast_index(full: &[usize], part: &[usize]) -> Option<Broadcast> {
    if full == part {
        return Some(Broadcast::Same);
    }
    if part.len() > full.len() {
        return None;
    }
    let offset = full.len() - part.len();
    let mut padded = vec![1usize; offset];
    padded.extend_from_slice(part);
    for d in 0..full.len() {
        if padded[d] != 1 && padded[d] != full[d] {
            return None;
        }
    }
    // axes where the operand varies; a single contiguous run needs no map
    let real: Vec<usize> = (0..full.len()).filter(|&d| padded[d] != 1).collect();
    if let (Some(&first), Some(&last)) = (real.first(), real.last()) {
        if last - first + 1 == real.len() {
            let inner = full[last + 1..].iter().product();
            let len = full[first..=last].iter().product();
            return Some(Broadcast::Strided { inner, len });
        }
    } else {
        let inner = full.iter().product::<usize>().max(1);
        return Some(Broadcast::Strided { inner, len: 1 });
    }
    broadcast_map(full, part).map(Broadcast::Map)
}

/// For every flat index of an array shaped `full`, the flat index of the
/// broadcast operand shaped `part` (right-aligned, extents equal or 1).
pub(crate) fn broadcast_map(full: &[usize], part: &[usize]) -> Option<Vec<usize>> {
    if part.len() > full.len() {
        return None;
    }
    let offset = full.len() - part.len();
    let mut part_strides = vec![0usize; full.len()];
    let mut stride = 1;
    for (d, &extent) in part.iter().enumerate().rev() {
        let fd = d + offset;
        if extent == full[fd] {
            part_strides[fd] = if extent == 1 { 0 } else { stride };
        } else if extent == 1 {
            part_strides[fd] = 0;
        } else {
            return None;
        }
        stride *= extent;
    }
    let total: usize = full.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; full.len()];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..full.len()).rev() {
            idx[d] += 1;
            pos += part_strides[d];
            if idx[d] < full[d] {
                break;
            }
            pos -= part_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}
