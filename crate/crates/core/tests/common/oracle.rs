//! Straight-line forward-mode reference for the adversarial + cycle objective.
//! Every layer is a plain loop over dual numbers, written without the tape.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual { v: s, d: self.d / (2.0 * s) }
    }

    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual { v: t, d: self.d * (1.0 - t * t) }
    }

    fn abs(self) -> Self {
        if self.v >= 0.0 {
            self
        } else {
            -self
        }
    }

    fn relu(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Dual::default()
        }
    }

    fn leaky(self, slope: f64) -> Self {
        if self.v > 0.0 {
            self
        } else {
            self * Dual::constant(slope)
        }
    }

    /// `log σ(z) = −(max(−z, 0) + ln(1 + e^{−|z|}))`.
    fn log_sigmoid(self) -> Self {
        let z = self.v;
        let value = -((-z).max(0.0) + (-z.abs()).exp().ln_1p());
        let sigma_neg = 1.0 / (1.0 + z.exp());
        Dual { v: value, d: self.d * sigma_neg }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual { v: self.v / o.v, d: (self.d * o.v - self.v * o.d) / (o.v * o.v) }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

/// A `C×H×W` map of duals.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<Dual>,
}

impl Map {
    pub fn from_values(c: usize, h: usize, w: usize, values: &[f32]) -> Self {
        Map { c, h, w, data: values.iter().map(|&v| Dual::constant(f64::from(v))).collect() }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> Dual {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// One convolution's weights and bias as duals.
pub struct Layer {
    pub w: Vec<Dual>,
    pub b: Vec<Dual>,
}

fn conv(x: &Map, layer: &Layer, cout: usize, k: usize, stride: usize, pad: usize) -> Map {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut data = vec![Dual::default(); cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = layer.b[co];
                for ci in 0..x.c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let wv = layer.w[((co * x.c + ci) * k + ky) * k + kx];
                            acc = acc + wv * x.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
                data[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Map { c: cout, h: oh, w: ow, data }
}

/// Stride 2, padding 1, output padding 1, 3×3 kernel; weight is `Cin×Cout×3×3`.
fn conv_transpose(x: &Map, layer: &Layer, cout: usize) -> Map {
    let (k, stride, pad) = (3usize, 2usize, 1isize);
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut data: Vec<Dual> = (0..cout * oh * ow).map(|i| layer.b[i / (oh * ow)]).collect();
    for ci in 0..x.c {
        for iy in 0..x.h {
            for ix in 0..x.w {
                let v = x.at(ci, iy, ix);
                for co in 0..cout {
                    for ky in 0..k {
                        let oy = (iy * stride + ky) as isize - pad;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = (ix * stride + kx) as isize - pad;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            let wv = layer.w[((ci * cout + co) * k + ky) * k + kx];
                            let slot = (co * oh + oy as usize) * ow + ox as usize;
                            data[slot] = data[slot] + wv * v;
                        }
                    }
                }
            }
        }
    }
    Map { c: cout, h: oh, w: ow, data }
}

fn reflect(x: &Map, p: usize) -> Map {
    let (h, w) = (x.h + 2 * p, x.w + 2 * p);
    let idx = |i: usize, n: usize| -> usize {
        let j = i as isize - p as isize;
        let j = if j < 0 { -j } else { j };
        let j = if j >= n as isize { 2 * (n as isize - 1) - j } else { j };
        j as usize
    };
    let mut data = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                data.push(x.at(c, idx(y, x.h), idx(xx, x.w)));
            }
        }
    }
    Map { c: x.c, h, w, data }
}

fn instance_norm(x: &Map) -> Map {
    let n = x.h * x.w;
    let nf = Dual::constant(n as f64);
    let mut data = Vec::with_capacity(x.data.len());
    for c in 0..x.c {
        let plane = &x.data[c * n..(c + 1) * n];
        let mut mean = Dual::default();
        for &v in plane {
            mean = mean + v;
        }
        let mean = mean / nf;
        let mut var = Dual::default();
        for &v in plane {
            var = var + (v - mean) * (v - mean);
        }
        let std = (var / nf + Dual::constant(1e-5)).sqrt();
        data.extend(plane.iter().map(|&v| (v - mean) / std));
    }
    Map { data, ..*x }
}

fn map(x: &Map, f: impl Fn(Dual) -> Dual) -> Map {
    Map { data: x.data.iter().map(|&v| f(v)).collect(), ..*x }
}

fn add(a: &Map, b: &Map) -> Map {
    Map { data: a.data.iter().zip(&b.data).map(|(&p, &q)| p + q).collect(), ..*a }
}

/// ResNet translator: reflect-7 stem, two stride-2 downsamplers, residual
/// blocks, two transposed upsamplers, reflect-7 tanh head.
pub fn generator(x: &Map, layers: &[Layer], base: usize, n_res: usize) -> Map {
    let mut h = map(&instance_norm(&conv(&reflect(x, 3), &layers[0], base, 7, 1, 0)), Dual::relu);
    h = map(&instance_norm(&conv(&h, &layers[1], 2 * base, 3, 2, 1)), Dual::relu);
    h = map(&instance_norm(&conv(&h, &layers[2], 4 * base, 3, 2, 1)), Dual::relu);
    for r in 0..n_res {
        let y = map(&instance_norm(&conv(&reflect(&h, 1), &layers[3 + 2 * r], 4 * base, 3, 1, 0)), Dual::relu);
        let y = instance_norm(&conv(&reflect(&y, 1), &layers[4 + 2 * r], 4 * base, 3, 1, 0));
        h = add(&h, &y);
    }
    let up = 3 + 2 * n_res;
    h = map(&instance_norm(&conv_transpose(&h, &layers[up], 2 * base)), Dual::relu);
    h = map(&instance_norm(&conv_transpose(&h, &layers[up + 1], base)), Dual::relu);
    map(&conv(&reflect(&h, 3), &layers[up + 2], 3, 7, 1, 0), Dual::tanh)
}

/// Five-layer PatchGAN with 4×4 kernels and zero padding 1.
pub fn discriminator(x: &Map, layers: &[Layer], ndf: usize) -> Map {
    let leaky = |v: Dual| v.leaky(0.2);
    let mut h = map(&conv(x, &layers[0], ndf, 4, 2, 1), leaky);
    for (i, (mult, stride)) in [(2, 2), (4, 2), (8, 1)].into_iter().enumerate() {
        h = map(&instance_norm(&conv(&h, &layers[i + 1], ndf * mult, 4, stride, 1)), leaky);
    }
    conv(&h, &layers[4], 1, 4, 1, 1)
}

fn mean(values: impl Iterator<Item = Dual>) -> Dual {
    let mut n = 0usize;
    let mut acc = Dual::default();
    for v in values {
        acc = acc + v;
        n += 1;
    }
    acc / Dual::constant(n as f64)
}

/// `Σ|x_rec − x| / (H·W)`.
fn color_cycle(x: &Map, x_rec: &Map) -> Dual {
    let mut acc = Dual::default();
    for (&a, &b) in x.data.iter().zip(&x_rec.data) {
        acc = acc + (b - a).abs();
    }
    acc / Dual::constant((x.h * x.w) as f64)
}

pub struct Nets<'a> {
    pub g_r2n: &'a [Layer],
    pub g_n2r: &'a [Layer],
    pub d_r: &'a [Layer],
    pub d_n: &'a [Layer],
    pub base: usize,
    pub n_res: usize,
}

/// `λ_adv·(−E log σ(D_N(n_r)) − E log σ(D_R(r_n))) + λ_cyc·(cc(r, r*) + cc(n, n*))`.
pub fn objective(nets: &Nets, r: &Map, n: &Map, lambda_cyc: f64, lambda_adv: f64) -> Dual {
    let n_r = generator(r, nets.g_r2n, nets.base, nets.n_res);
    let r_star = generator(&n_r, nets.g_n2r, nets.base, nets.n_res);
    let r_n = generator(n, nets.g_n2r, nets.base, nets.n_res);
    let n_star = generator(&r_n, nets.g_r2n, nets.base, nets.n_res);
    let adv_n = -mean(discriminator(&n_r, nets.d_n, nets.base).data.into_iter().map(Dual::log_sigmoid));
    let adv_r = -mean(discriminator(&r_n, nets.d_r, nets.base).data.into_iter().map(Dual::log_sigmoid));
    let cyc = color_cycle(r, &r_star) + color_cycle(n, &n_star);
    Dual::constant(lambda_adv) * (adv_n + adv_r) + Dual::constant(lambda_cyc) * cyc
}

/// Builds layers from flat `(weight, bias)` value pairs, seeding derivatives
/// from `direction` (same flat layout, weights then biases per layer).
pub fn layers_with_direction(values: &[Vec<f64>], direction: &[Vec<f64>]) -> Vec<Layer> {
    values
        .chunks(2)
        .zip(direction.chunks(2))
        .map(|(vals, dirs)| {
            let duals = |v: &[f64], d: &[f64]| v.iter().zip(d).map(|(&v, &d)| Dual { v, d }).collect::<Vec<_>>();
            Layer { w: duals(&vals[0], &dirs[0]), b: duals(&vals[1], &dirs[1]) }
        })
        .collect()
}
