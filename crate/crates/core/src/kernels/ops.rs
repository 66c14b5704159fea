use super::Tensor;

/// Max-subtracted softmax of a slice, written in place.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Given softmax output `p` and upstream `dp`, returns the logit gradient
/// `p ⊙ (dp − ⟨dp, p⟩)` in `dp`.
pub fn softmax_backward_in_place(p: &[f64], dp: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
    for (g, &pi) in dp.iter_mut().zip(p) {
        *g = pi * (*g - dot);
    }
}

/// Softmax along `axis` of an arbitrary-rank tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    assert!(axis < shape.len(), "softmax axis out of range");
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = data[base + k * inner];
            }
            softmax_in_place(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                data[base + k * inner] = *b;
            }
        }
    }
    out
}

const NORM_FLOOR: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with norms floored at 1e-12.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(NORM_FLOOR) * norm(b).max(NORM_FLOOR))
}

/// Accumulates `dc · ∂cos/∂a` and `dc · ∂cos/∂b` into `da`, `db`.
pub fn cosine_sim_backward(a: &[f64], b: &[f64], dc: f64, da: &mut [f64], db: &mut [f64]) {
    let na_raw = norm(a);
    let nb_raw = norm(b);
    let na = na_raw.max(NORM_FLOOR);
    let nb = nb_raw.max(NORM_FLOOR);
    let c = dot(a, b) / (na * nb);
    // The floor makes the norm constant below 1e-12, dropping its derivative.
    let ka = if na_raw > NORM_FLOOR { c / (na * na) } else { 0.0 };
    let kb = if nb_raw > NORM_FLOOR { c / (nb * nb) } else { 0.0 };
    let inv = 1.0 / (na * nb);
    for i in 0..a.len() {
        da[i] += dc * (b[i] * inv - ka * a[i]);
        db[i] += dc * (a[i] * inv - kb * b[i]);
    }
}

/// Bilinear interpolation stencil for one sample location on an `h x w` grid.
///
/// Normalised coordinates map to pixels as `x = u (w-1)`, `y = v (h-1)`.
/// Locations outside the grid produce an invalid stencil whose sample is
/// zero and whose gradients vanish.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps {
    pub valid: bool,
    /// Flat pixel indices `row * w + col` of the four corners.
    pub pixels: [usize; 4],
    pub weights: [f64; 4],
    pub dweights_du: [f64; 4],
    pub dweights_dv: [f64; 4],
}

impl BilinearTaps {
    pub fn new(h: usize, w: usize, u: f64, v: f64) -> Self {
        let x = u * (w as f64 - 1.0);
        let y = v * (h as f64 - 1.0);
        let invalid = Self {
            valid: false,
            pixels: [0; 4],
            weights: [0.0; 4],
            dweights_du: [0.0; 4],
            dweights_dv: [0.0; 4],
        };
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return invalid;
        }
        let (x0, x1, fx) = axis_cell(x, w);
        let (y0, y1, fy) = axis_cell(y, h);
        let sx = (w as f64 - 1.0).max(0.0);
        let sy = (h as f64 - 1.0).max(0.0);
        Self {
            valid: true,
            pixels: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            dweights_du: [-(1.0 - fy) * sx, (1.0 - fy) * sx, -fy * sx, fy * sx],
            dweights_dv: [-(1.0 - fx) * sy, -fx * sy, (1.0 - fx) * sy, fx * sy],
        }
    }

    /// Writes the interpolated channels `[c0, c0+out.len())` of a `[h,w,c]` map.
    pub fn sample(&self, map: &[f64], c: usize, c0: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let len = out.len();
        if !self.valid {
            return;
        }
        for k in 0..4 {
            let wk = self.weights[k];
            if wk == 0.0 {
                continue;
            }
            let base = self.pixels[k] * c + c0;
            for (o, m) in out.iter_mut().zip(&map[base..base + len]) {
                *o += wk * m;
            }
        }
    }

    /// Backward of [`BilinearTaps::sample`]: accumulates into `dmap` and
    /// returns `(du, dv)`.
    pub fn backward(&self, map: &[f64], c: usize, c0: usize, dout: &[f64], dmap: Option<&mut [f64]>) -> (f64, f64) {
        if !self.valid {
            return (0.0, 0.0);
        }
        let mut du = 0.0;
        let mut dv = 0.0;
        for k in 0..4 {
            let base = self.pixels[k] * c + c0;
            let d = dot(&map[base..base + dout.len()], dout);
            du += self.dweights_du[k] * d;
            dv += self.dweights_dv[k] * d;
        }
        if let Some(dmap) = dmap {
            for k in 0..4 {
                let wk = self.weights[k];
                if wk == 0.0 {
                    continue;
                }
                let base = self.pixels[k] * c + c0;
                for (g, d) in dmap[base..base + dout.len()].iter_mut().zip(dout) {
                    *g += wk * d;
                }
            }
        }
        (du, dv)
    }
}

fn axis_cell(x: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let x0 = (x.floor() as usize).min(n - 2);
    (x0, x0 + 1, x - x0 as f64)
}

/// Samples a `[h, w, c]` map at normalised `(u, v)`; zeros outside the map.
pub fn bilinear_sample(map: &Tensor, uv: (f64, f64)) -> Vec<f64> {
    let s = map.shape();
    assert_eq!(s.len(), 3, "bilinear_sample expects [H,W,C]");
    let (h, w, c) = (s[0], s[1], s[2]);
    let taps = BilinearTaps::new(h, w, uv.0, uv.1);
    let mut out = vec![0.0; c];
    taps.sample(map.data(), c, 0, &mut out);
    out
}
