//! Straight-line reference implementations of the orientation embedding.

use shipseg_core::Tensor;

/// Align-corners bilinear read of one `h x w` plane at normalized `(x, y)`,
/// taps outside the plane contribute zero.
pub fn sample_bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let ix = if w == 1 {
        0.0
    } else {
        (x + 1.0) / 2.0 * (w - 1) as f64
    };
    let iy = if h == 1 {
        0.0
    } else {
        (y + 1.0) / 2.0 * (h - 1) as f64
    };
    let (x0, y0) = (ix.floor(), iy.floor());
    let (fx, fy) = (ix - x0, iy - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (cx, cy) = (x0 + dx, y0 + dy);
            if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                continue;
            }
            acc += wx * wy * plane[cy as usize * w + cx as usize];
        }
    }
    acc
}

fn lattice_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Every channel of `[C, H, W]` read at `R(theta) p` for each lattice point `p`.
pub fn rotate(x: &Tensor, theta: f64) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                let (px, py) = (lattice_coord(col, w), lattice_coord(r, h));
                let qx = theta.cos() * px - theta.sin() * py;
                let qy = theta.sin() * px + theta.cos() * py;
                out.set(&[ch, r, col], sample_bilinear(plane, h, w, qx, qy));
            }
        }
    }
    out
}

/// Rotation of an odd square map by `quarter_turns * π/2`, by index arithmetic.
pub fn rotate_by_index(x: &Tensor, quarter_turns: usize) -> Tensor {
    let (c, n) = (x.dim(0), x.dim(1));
    assert!(n % 2 == 1 && x.dim(2) == n);
    let k = (n / 2) as i64;
    let mut out = Tensor::zeros(&[c, n, n]);
    for ch in 0..c {
        for r in 0..n {
            for col in 0..n {
                let (mut dx, mut dy) = (col as i64 - k, r as i64 - k);
                for _ in 0..quarter_turns % 4 {
                    (dx, dy) = (-dy, dx);
                }
                let v = x.at(&[ch, (dy + k) as usize, (dx + k) as usize]);
                out.set(&[ch, r, col], v);
            }
        }
    }
    out
}

/// Zero-padded "same" convolution with a square odd kernel `[O, I, k, k]`.
pub fn conv_same(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (co, k) = (weight.dim(0), weight.dim(2));
    let pad = (k / 2) as i64;
    let mut out = Tensor::zeros(&[co, h, w]);
    for o in 0..co {
        for r in 0..h {
            for col in 0..w {
                let mut acc = bias.data()[o];
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (yy, xx) =
                                (r as i64 + ky as i64 - pad, col as i64 + kx as i64 - pad);
                            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            acc +=
                                weight.at(&[o, i, ky, kx]) * x.at(&[i, yy as usize, xx as usize]);
                        }
                    }
                }
                out.set(&[o, r, col], acc);
            }
        }
    }
    out
}

/// Grouped rotate-then-convolve, concatenated in angle order.
pub fn orientation_branches(
    x: &Tensor,
    weights: &[Tensor],
    biases: &[Tensor],
    relu: bool,
) -> Tensor {
    let n_a = weights.len();
    let group = x.dim(0) / n_a;
    let mut parts = Vec::new();
    for i in 0..n_a {
        let theta = i as f64 * std::f64::consts::PI / n_a as f64;
        let xi = x.slice0(i * group, (i + 1) * group);
        parts.push(conv_same(&rotate(&xi, theta), &weights[i], &biases[i]));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let cat = Tensor::concat0(&refs);
    if relu {
        cat.map(|v| v.max(0.0))
    } else {
        cat
    }
}

/// Two-way softmax gate from a 1x1 convolution of `[orient; polar]`, then the
/// convex blend. Returns `(fused, gate)`.
pub fn fuse(
    orient: &Tensor,
    polar: &Tensor,
    gate_weight: &Tensor,
    gate_bias: &Tensor,
) -> (Tensor, Tensor) {
    let (c, h, w) = (orient.dim(0), orient.dim(1), orient.dim(2));
    let mut fused = Tensor::zeros(&[c, h, w]);
    let mut gate = Tensor::zeros(&[2, h, w]);
    for r in 0..h {
        for col in 0..w {
            let mut logits = [gate_bias.data()[0], gate_bias.data()[1]];
            for (o, l) in logits.iter_mut().enumerate() {
                for i in 0..c {
                    *l += gate_weight.at(&[o, i, 0, 0]) * orient.at(&[i, r, col]);
                    *l += gate_weight.at(&[o, c + i, 0, 0]) * polar.at(&[i, r, col]);
                }
            }
            let m = logits[0].max(logits[1]);
            let (e0, e1) = ((logits[0] - m).exp(), (logits[1] - m).exp());
            let g = e0 / (e0 + e1);
            gate.set(&[0, r, col], g);
            gate.set(&[1, r, col], 1.0 - g);
            for i in 0..c {
                fused.set(
                    &[i, r, col],
                    g * orient.at(&[i, r, col]) + (1.0 - g) * polar.at(&[i, r, col]),
                );
            }
        }
    }
    (fused, gate)
}
