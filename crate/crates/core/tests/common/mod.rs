//! Straight-line reference evaluations written with explicit loops over
//! plain `Vec<f64>` buffers. They share no code with the library besides
//! reading parameter values by name.

#![allow(dead_code)]

pub mod checks;

use hvi_enhance::params::ParamRegistry;
use hvi_enhance::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Img {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Img {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, c, h, w, d: vec![0.0; b * c * h * w] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self { b: s[0], c: s[1], h: s[2], w: s[3], d: t.data().to_vec() }
    }

    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[self.idx(n, c, y, x)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Img {
        Img { d: self.d.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn zip(&self, o: &Img, f: impl Fn(f64, f64) -> f64) -> Img {
        assert_eq!((self.b, self.c, self.h, self.w), (o.b, o.c, o.h, o.w));
        Img { d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect(), ..self.clone() }
    }

    /// Multiply by a gate that is broadcast over channels or space.
    pub fn gated(&self, g: &Img) -> Img {
        let mut out = self.clone();
        for n in 0..self.b {
            for c in 0..self.c {
                for y in 0..self.h {
                    for x in 0..self.w {
                        let gc = if g.c == 1 { 0 } else { c };
                        let (gy, gx) = if g.h == 1 { (0, 0) } else { (y, x) };
                        let i = out.idx(n, c, y, x);
                        out.d[i] *= g.at(n, gc, gy, gx);
                    }
                }
            }
        }
        out
    }

    pub fn concat(&self, o: &Img) -> Img {
        let mut out = Img::zeros(self.b, self.c + o.c, self.h, self.w);
        for n in 0..self.b {
            for c in 0..out.c {
                for y in 0..self.h {
                    for x in 0..self.w {
                        let v = if c < self.c { self.at(n, c, y, x) } else { o.at(n, c - self.c, y, x) };
                        let i = out.idx(n, c, y, x);
                        out.d[i] = v;
                    }
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn param(p: &ParamRegistry<f64>, name: &str) -> Vec<f64> {
    p.value(name).unwrap_or_else(|_| panic!("missing {name}")).data().to_vec()
}

/// Zero-padded "same" convolution with stride 1.
pub fn conv(p: &ParamRegistry<f64>, name: &str, x: &Img, kh: usize, kw: usize, dil: usize, bias: bool) -> Img {
    let w = param(p, &format!("{name}.weight"));
    let cout = w.len() / (x.c * kh * kw);
    let bvec = if bias { param(p, &format!("{name}.bias")) } else { vec![0.0; cout] };
    let (ph, pw) = (dil * (kh - 1) / 2, dil * (kw - 1) / 2);
    let mut out = Img::zeros(x.b, cout, x.h, x.w);
    for n in 0..x.b {
        for o in 0..cout {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = bvec[o];
                    for c in 0..x.c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = (y + i * dil) as isize - ph as isize;
                                let sx = (xx + j * dil) as isize - pw as isize;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                acc += w[((o * x.c + c) * kh + i) * kw + j] * x.at(n, c, sy as usize, sx as usize);
                            }
                        }
                    }
                    let k = out.idx(n, o, y, xx);
                    out.d[k] = acc;
                }
            }
        }
    }
    out
}

fn channel_attention(p: &ParamRegistry<f64>, name: &str, x: &Img) -> Img {
    let mut pooled = Img::zeros(x.b, x.c, 1, 1);
    for n in 0..x.b {
        for c in 0..x.c {
            let mut s = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    s += x.at(n, c, y, xx);
                }
            }
            pooled.d[n * x.c + c] = s / (x.h * x.w) as f64;
        }
    }
    let hidden = conv(p, &format!("{name}.fc1"), &pooled, 1, 1, 1, true).map(relu);
    conv(p, &format!("{name}.fc2"), &hidden, 1, 1, 1, true).map(sigmoid)
}

fn spatial_attention(p: &ParamRegistry<f64>, name: &str, x: &Img) -> Img {
    let mut pooled = Img::zeros(x.b, 2, x.h, x.w);
    for n in 0..x.b {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = 0.0;
                let mut m = f64::NEG_INFINITY;
                for c in 0..x.c {
                    s += x.at(n, c, y, xx);
                    m = m.max(x.at(n, c, y, xx));
                }
                let (i0, i1) = (pooled.idx(n, 0, y, xx), pooled.idx(n, 1, y, xx));
                pooled.d[i0] = s / x.c as f64;
                pooled.d[i1] = m;
            }
        }
    }
    conv(p, &format!("{name}.conv"), &pooled, 7, 7, 1, true).map(sigmoid)
}

fn pixel_attention(p: &ParamRegistry<f64>, name: &str, a: &Img, b: &Img) -> Img {
    let hidden = conv(p, &format!("{name}.mix"), &a.concat(b), 1, 1, 1, true).map(relu);
    conv(p, &format!("{name}.out"), &hidden, 1, 1, 1, true)
}

/// Fusion of `primary` with `other`, reading parameters under `name`.
pub fn mafm(p: &ParamRegistry<f64>, name: &str, primary: &Img, other: &Img) -> Img {
    let f_init = primary.zip(other, |a, b| a + b);
    let ca = channel_attention(p, &format!("{name}.ca"), &f_init);
    let ca_feat = f_init.gated(&ca).zip(&f_init, |a, b| a + b);
    let w_c = pixel_attention(p, &format!("{name}.pa_c"), &ca_feat, &f_init).map(sigmoid);
    let sa = spatial_attention(p, &format!("{name}.sa"), &f_init);
    let sa_feat = f_init.gated(&sa).zip(&f_init, |a, b| a + b);
    let w_s = pixel_attention(p, &format!("{name}.pa_s"), &sa_feat, &f_init).map(sigmoid);
    let phi = param(p, &format!("{name}.phi"))[0];
    let omega = param(p, &format!("{name}.omega"))[0];
    let w = w_c.zip(&w_s, |c, s| phi * c + omega * s);
    let mut out = f_init.clone();
    for k in 0..out.d.len() {
        out.d[k] = f_init.d[k] + w.d[k] * other.d[k] + (1.0 - w.d[k]) * primary.d[k];
    }
    out
}

pub fn cross_attention(p: &ParamRegistry<f64>, name: &str, heads: usize, xq: &Img, xkv: &Img) -> Img {
    let q = conv(p, &format!("{name}.q"), xq, 1, 1, 1, false);
    let k = conv(p, &format!("{name}.k"), xkv, 1, 1, 1, false);
    let v = conv(p, &format!("{name}.v"), xkv, 1, 1, 1, false);
    let (c, hw) = (xq.c, xq.h * xq.w);
    let d = c / heads;
    let mut mixed = Img::zeros(xq.b, c, xq.h, xq.w);
    let row = |t: &Img, n: usize, ch: usize| -> Vec<f64> {
        let s = &t.d[(n * c + ch) * hw..(n * c + ch + 1) * hw];
        let norm = (s.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
        s.iter().map(|x| x / norm).collect()
    };
    for n in 0..xq.b {
        for h in 0..heads {
            for i in 0..d {
                let qi = row(&q, n, h * d + i);
                let mut scores: Vec<f64> = (0..d)
                    .map(|j| {
                        let kj = row(&k, n, h * d + j);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for s in scores.iter_mut() {
                    *s = (*s - m).exp() / z;
                }
                for pix in 0..hw {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += scores[j] * v.d[(n * c + h * d + j) * hw + pix];
                    }
                    mixed.d[(n * c + h * d + i) * hw + pix] = acc;
                }
            }
        }
    }
    conv(p, &format!("{name}.proj"), &mixed, 1, 1, 1, true)
}

pub fn mfem(p: &ParamRegistry<f64>, name: &str, x: &Img) -> Img {
    let b1 = conv(p, &format!("{name}.b1"), x, 1, 1, 1, true);
    let b3 = conv(p, &format!("{name}.b3"), x, 3, 3, 1, true);
    let b3d2 = conv(p, &format!("{name}.b3d2"), x, 3, 3, 2, true);
    let b13 = conv(p, &format!("{name}.b13"), x, 1, 3, 1, true);
    let b31 = conv(p, &format!("{name}.b31"), &b13, 3, 1, 1, true);
    let cat = b1.concat(&b3).concat(&b3d2).concat(&b31);
    conv(p, &format!("{name}.fuse"), &cat, 1, 1, 1, true)
}

pub fn cdem(p: &ParamRegistry<f64>, name: &str, heads: usize, f_self: &Img, f_fused: &Img) -> Img {
    let s = |n: &str| param(p, &format!("{name}.{n}"))[0];
    let (alpha, beta, lambda, mu) = (s("alpha"), s("beta"), s("lambda"), s("mu"));
    let z = cross_attention(p, &format!("{name}.attn"), heads, f_self, f_fused);
    let ffn_in = z.zip(f_fused, |a, b| alpha * a + beta * b);
    let hidden = conv(p, &format!("{name}.ffn.fc1"), &ffn_in, 1, 1, 1, true).map(gelu);
    let ffn = conv(p, &format!("{name}.ffn.fc2"), &hidden, 1, 1, 1, true);
    let z_hat = ffn.zip(&z, |f, zz| lambda * f + mu * zz);
    let base = f_self.zip(&z_hat, |a, b| a + b);
    mfem(p, &format!("{name}.mfem"), &base).zip(&base, |a, b| a + b)
}

/// The combined chroma/luminance objective on plain planes of `b` images
/// of `hw` pixels each. Returns `(l_i, w_h, w_v, l_ihv, l_hv, total)`.
pub fn ccl(pred: [&[f64]; 3], gt: [&[f64]; 3], b: usize) -> (f64, f64, f64, f64, f64, f64) {
    let [ph, pv, pi] = pred;
    let [gh, gv, gi] = gt;
    let n = pi.len();
    let mut l_i = 0.0;
    let mut l_h = 0.0;
    let mut l_v = 0.0;
    for k in 0..n {
        l_i += (pi[k] - gi[k]).powi(2);
        l_h += (ph[k] - gh[k]).powi(2);
        l_v += (pv[k] - gv[k]).powi(2);
    }
    l_i /= n as f64;
    l_h /= n as f64;
    l_v /= n as f64;
    let mut mean_abs = 0.0;
    for k in 0..n {
        mean_abs += (pi[k] - gi[k]).abs();
    }
    mean_abs /= n as f64;
    let mut var = 0.0;
    for k in 0..n {
        var += ((pi[k] - gi[k]).abs() - mean_abs).powi(2);
    }
    var /= n as f64;
    let w_h = 1.0 + mean_abs;
    let w_v = 1.0 + var.sqrt();
    let l_ihv = w_h * l_h + w_v * l_v;
    let hw = n / b;
    let mut l_hv = 0.0;
    for img in 0..b {
        let mut m_hat = 0.0;
        let mut m = 0.0;
        for k in img * hw..(img + 1) * hw {
            m_hat += ph[k] * pv[k];
            m += gh[k] * gv[k];
        }
        l_hv += (m_hat / hw as f64 - m / hw as f64).powi(2);
    }
    l_hv /= b as f64;
    (l_i, w_h, w_v, l_ihv, l_hv, l_i + l_ihv + l_hv)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Replace every parameter (including scalars) with uniform noise.
pub fn randomize(p: &mut ParamRegistry<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, v) in p.iter_mut() {
        v.value = random_tensor(v.value.shape(), -0.5, 0.5, &mut rng);
    }
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
