//! Pure data-side feature preparation: patch extraction, sinusoidal position
//! features, pooling matrices, attention masks. Everything here produces plain
//! tensors that enter the graph as constants.
//!
//! Image tokens are kept in per-view Morton (quadtree) order so that a 2x2
//! spatial merge is a plain row-major reshape: the four children of every
//! merged cell occupy consecutive rows.

use incom_core::tensor::Tensor;
use incom_core::Scalar;

/// Token coordinates (view, gy, gx) in view-major Morton order for a square
/// power-of-two grid.
pub fn morton_coords(grid: usize, views: usize) -> Vec<(usize, usize, usize)> {
    assert!(grid.is_power_of_two(), "morton order needs a power-of-two grid");
    let mut cells: Vec<(usize, usize, usize)> = (0..grid * grid)
        .map(|i| {
            let (y, x) = (i / grid, i % grid);
            (morton_code(y, x), y, x)
        })
        .collect();
    cells.sort_unstable();
    let mut out = Vec::with_capacity(views * grid * grid);
    for v in 0..views {
        out.extend(cells.iter().map(|&(_, y, x)| (v, y, x)));
    }
    out
}

fn morton_code(y: usize, x: usize) -> usize {
    let mut code = 0usize;
    for bit in 0..usize::BITS / 2 {
        code |= ((x >> bit) & 1) << (2 * bit);
        code |= ((y >> bit) & 1) << (2 * bit + 1);
    }
    code
}

/// Cut one sample's image stack (views, C, H, W) into flattened patches, one
/// row per entry of `coords`; each row is the patch's pixels channel-major
/// (C * p * p).
pub fn patchify<S: Scalar>(
    images: &[f32],
    views: usize,
    channels: usize,
    h: usize,
    w: usize,
    p: usize,
    coords: &[(usize, usize, usize)],
) -> Tensor<S> {
    assert_eq!(images.len(), views * channels * h * w);
    assert!(h % p == 0 && w % p == 0);
    let mut out = Vec::with_capacity(coords.len() * channels * p * p);
    for &(v, gy, gx) in coords {
        for c in 0..channels {
            for py in 0..p {
                for px in 0..p {
                    let y = gy * p + py;
                    let x = gx * p + px;
                    out.push(S::from_f64(images[((v * channels + c) * h + y) * w + x] as f64));
                }
            }
        }
    }
    Tensor::new(vec![coords.len(), channels * p * p], out)
}

/// Patch-center positions in [0,1]^2 for each token. Views share the same
/// centers; view identity is carried by a learned embedding instead.
pub fn centers(coords: &[(usize, usize, usize)], grid: usize) -> Vec<Vec<f64>> {
    coords
        .iter()
        .map(|&(_, gy, gx)| {
            vec![(gy as f64 + 0.5) / grid as f64, (gx as f64 + 0.5) / grid as f64]
        })
        .collect()
}

/// Sinusoidal features for a list of coordinate rows: for each coordinate c
/// and frequency f_i = 2^i * PI, emit sin(f_i c) and cos(f_i c). Input
/// coordinates are divided by `scale` first. Output is (N, dims * 2 * n_freq).
pub fn sin_features<S: Scalar>(coords: &[Vec<f64>], n_freq: usize, scale: f64) -> Tensor<S> {
    let n = coords.len();
    assert!(n > 0);
    let dims = coords[0].len();
    let mut out = Vec::with_capacity(n * dims * 2 * n_freq);
    for row in coords {
        assert_eq!(row.len(), dims);
        for &c in row {
            let c = c / scale;
            for i in 0..n_freq {
                let f = std::f64::consts::PI * (1u64 << i) as f64;
                out.push(S::from_f64((f * c).sin()));
                out.push(S::from_f64((f * c).cos()));
            }
        }
    }
    Tensor::new(vec![n, dims * 2 * n_freq], out)
}

pub fn sin_feature_dim(dims: usize, n_freq: usize) -> usize {
    dims * 2 * n_freq
}

/// Row-stochastic nearest-centroid pooling matrix (n_out, n_in). Centroids are
/// the first `n_out` points (inputs arrive in farthest-point order, so the
/// prefix is a coverage subset). Each input point is assigned to its nearest
/// centroid (lowest index on ties) and each row averages its members.
pub fn pool_matrix<S: Scalar>(coords: &[[f64; 2]], n_out: usize) -> Tensor<S> {
    let n_in = coords.len();
    assert!(n_out >= 1 && n_out <= n_in);
    let mut assign = vec![0usize; n_in];
    for (i, p) in coords.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, c) in coords.iter().take(n_out).enumerate() {
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        assign[i] = best;
    }
    let mut counts = vec![0usize; n_out];
    for &a in &assign {
        counts[a] += 1;
    }
    let mut data = vec![S::from_f64(0.0); n_out * n_in];
    for (i, &a) in assign.iter().enumerate() {
        data[a * n_in + i] = S::from_f64(1.0 / counts[a] as f64);
    }
    Tensor::new(vec![n_out, n_in], data)
}

const NEG: f64 = -1e30;

/// Windowed self-attention: token q attends token k iff both are in the same
/// view and their grid offsets are within win/2 in each axis (win odd). Shape
/// (T, T), 0 = keep, -1e30 = drop.
pub fn neighbor_mask<S: Scalar>(coords: &[(usize, usize, usize)], win: usize) -> Tensor<S> {
    let t = coords.len();
    let r = (win / 2) as isize;
    let mut data = vec![S::from_f64(NEG); t * t];
    for (q, &(qv, qy, qx)) in coords.iter().enumerate() {
        for (k, &(kv, ky, kx)) in coords.iter().enumerate() {
            if qv == kv
                && (qy as isize - ky as isize).abs() <= r
                && (qx as isize - kx as isize).abs() <= r
            {
                data[q * t + k] = S::from_f64(0.0);
            }
        }
    }
    Tensor::new(vec![t, t], data)
}

/// Full attention within each view, nothing across views; tokens are
/// view-major contiguous. Shape (T, T).
pub fn per_view_mask<S: Scalar>(tokens_per_view: usize, views: usize) -> Tensor<S> {
    let t = views * tokens_per_view;
    let mut data = vec![S::from_f64(NEG); t * t];
    for v in 0..views {
        for a in 0..tokens_per_view {
            for b in 0..tokens_per_view {
                let q = v * tokens_per_view + a;
                let k = v * tokens_per_view + b;
                data[q * t + k] = S::from_f64(0.0);
            }
        }
    }
    Tensor::new(vec![t, t], data)
}

/// History-transformer mask for tokens [ctx, a_0 .. a_{H-1}] where the last
/// `valid[b]` action slots hold real actions (older slots are padding).
/// The context token attends itself and every valid action; action token i
/// attends the context token and valid actions j <= i; padded rows attend the
/// context token only so their softmax stays finite. Shape (B*heads, 1+H, 1+H).
pub fn history_mask<S: Scalar>(valid: &[usize], heads: usize, h: usize) -> Tensor<S> {
    let t = 1 + h;
    let b = valid.len();
    let mut data = vec![S::from_f64(NEG); b * heads * t * t];
    for (bi, &k) in valid.iter().enumerate() {
        assert!(k <= h);
        let first_real = h - k;
        let mut m = vec![S::from_f64(NEG); t * t];
        m[0] = S::from_f64(0.0); // ctx -> ctx
        for j in first_real..h {
            m[1 + j] = S::from_f64(0.0); // ctx -> valid actions
        }
        for i in 0..h {
            let row = (1 + i) * t;
            m[row] = S::from_f64(0.0); // action -> ctx
            if i >= first_real {
                for j in first_real..=i {
                    m[row + 1 + j] = S::from_f64(0.0); // causal over valid
                }
            }
        }
        for hd in 0..heads {
            let off = (bi * heads + hd) * t * t;
            data[off..off + t * t].copy_from_slice(&m);
        }
    }
    Tensor::new(vec![b * heads, t, t], data)
}

/// Sinusoidal features of per-sample flow times in [0,1]: (B, 2*n_freq).
pub fn time_features<S: Scalar>(ts: &[f64], n_freq: usize) -> Tensor<S> {
    let mut out = Vec::with_capacity(ts.len() * 2 * n_freq);
    for &t in ts {
        for i in 0..n_freq {
            let f = std::f64::consts::PI * (1u64 << i) as f64;
            out.push(S::from_f64((f * t).sin()));
            out.push(S::from_f64((f * t).cos()));
        }
    }
    Tensor::new(vec![ts.len(), 2 * n_freq], out)
}

/// Stack equal-shaped (T, F) tensors into (B, T, F).
pub fn stack<S: Scalar>(parts: &[Tensor<S>]) -> Tensor<S> {
    assert!(!parts.is_empty());
    let shape = parts[0].shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        assert_eq!(p.shape(), &shape[..], "stack shape mismatch");
        data.extend_from_slice(p.data());
    }
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::new(out_shape, data)
}
