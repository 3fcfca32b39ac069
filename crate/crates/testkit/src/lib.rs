//! Brute-force numerical oracles for the test suites.
//!
//! Nothing here shares code with the library under test: quadrature, the
//! integral representation of the modified Bessel function, finite
//! differences and two-sample statistics are written from scratch so that
//! they can serve as independent references.

use std::f64::consts::PI;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Globally adaptive Gauss-Kronrod (7/15) quadrature on a finite interval.
///
/// Splits the interval with the largest error estimate until the summed
/// estimate falls below `max(abs_tol, rel_tol * |I|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let mut segs = vec![{
        let (v, e) = gk15(&f, a, b);
        (a, b, v, e)
    }];
    for _ in 0..20_000 {
        let total: f64 = segs.iter().map(|s| s.2).sum();
        let err: f64 = segs.iter().map(|s| s.3).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let (idx, _) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).unwrap())
            .unwrap();
        let (lo, hi, _, _) = segs.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        segs.push((lo, mid, v1, e1));
        segs.push((mid, hi, v2, e2));
    }
    segs.iter().map(|s| s.2).sum()
}

/// `integrate` over `[a, b]` pre-split into `pieces` equal panels.
pub fn integrate_panels<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    pieces: usize,
    rel_tol: f64,
) -> f64 {
    let w = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| integrate(&f, a + i as f64 * w, a + (i + 1) as f64 * w, 1e-300, rel_tol))
        .sum()
}

/// Modified Bessel function of the second kind from its integral
/// representation `K_nu(z) = int_0^inf exp(-z cosh t) cosh(nu t) dt`.
pub fn bessel_k_integral(nu: f64, z: f64) -> f64 {
    assert!(z > 0.0);
    // exp(-z cosh t) < 1e-300 * exp(-z) beyond this point
    let t_max = (1.0 + 700.0 / z).acosh() + 1.0;
    // factor exp(-z) out to keep the integrand O(1)
    let g = |t: f64| (-z * (t.cosh() - 1.0)).exp() * (nu * t).cosh();
    let pieces = 16;
    integrate_panels(g, 0.0, t_max, pieces, 1e-14) * (-z).exp()
}

/// `K_{1/2}(z) = sqrt(pi / (2 z)) e^{-z}`.
pub fn bessel_k_half(z: f64) -> f64 {
    (PI / (2.0 * z)).sqrt() * (-z).exp()
}

/// `K_{5/2}(z) = sqrt(pi / (2 z)) e^{-z} (1 + 3/z + 3/z^2)`.
pub fn bessel_k_five_halves(z: f64) -> f64 {
    bessel_k_half(z) * (1.0 + 3.0 / z + 3.0 / (z * z))
}

/// Central difference of a scalar function.
pub fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Surface area of the unit sphere in R^d (d = 1, 2, 3).
pub fn unit_sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => panic!("unsupported dimension {d}"),
    }
}

/// `int_{R^d} f(|z|) dz` for a radial function, by radial quadrature.
pub fn radial_integral<F: Fn(f64) -> f64>(f: F, d: usize, r_max: f64, rel_tol: f64) -> f64 {
    let g = |r: f64| f(r) * r.powi(d as i32 - 1);
    unit_sphere_area(d) * integrate_panels(g, 0.0, r_max, 32, rel_tol)
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic two-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.628 * ((n + m) / (n * m)).sqrt()
}

/// Minimal splitmix64 generator for test data that must not depend on the
/// library's own random streams.
#[derive(Clone, Debug)]
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }
}
