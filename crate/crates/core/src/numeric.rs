//! Summation and quadrature primitives shared by the estimators.

use std::sync::OnceLock;

/// Neumaier-compensated running sum.
///
/// Used wherever a reduction over many terms feeds a variance, so that the
/// result does not drift with the number or order of terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn sum(xs: &[f64]) -> f64 {
    xs.iter().copied().collect::<CompensatedSum>().value()
}

pub fn mean(xs: &[f64]) -> f64 {
    sum(xs) / xs.len() as f64
}

/// Σ(xᵢ − x̄)², two-pass with compensated sums.
pub fn sum_sq_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter()
        .map(|&x| (x - m) * (x - m))
        .collect::<CompensatedSum>()
        .value()
}

/// Sample variance with the n−1 divisor. Returns NaN for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    sum_sq_dev(xs) / (xs.len() - 1) as f64
}

/// Sample covariance with the n−1 divisor.
pub fn sample_covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return f64::NAN;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let s: CompensatedSum = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).collect();
    s.value() / (xs.len() - 1) as f64
}

const GL_ORDER: usize = 16;

/// Nodes and weights of the 16-point Gauss–Legendre rule on [−1, 1].
fn gauss_legendre() -> &'static ([f64; GL_ORDER], [f64; GL_ORDER]) {
    static RULE: OnceLock<([f64; GL_ORDER], [f64; GL_ORDER])> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_ORDER;
        let mut nodes = [0.0; GL_ORDER];
        let mut weights = [0.0; GL_ORDER];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                // Legendre recurrence for P_n(x) and its derivative.
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

/// Composite Gauss–Legendre integral of `f` over [a, b] with panels no wider
/// than `max_width`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, max_width: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (nodes, weights) = gauss_legendre();
    let panels = (((b - a).abs() / max_width).ceil() as usize).max(1);
    let h = (b - a) / panels as f64;
    let mut total = CompensatedSum::new();
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        let mut acc = 0.0;
        for (x, w) in nodes.iter().zip(weights) {
            acc += w * f(mid + 0.5 * h * x);
        }
        total.add(0.5 * h * acc);
    }
    total.value()
}

/// E[f(W)] for W ~ N(0,1), integrating over [−12, 12] with breakpoints.
///
/// `breaks` are interior points where `f` may be discontinuous; the rule is
/// applied separately on each piece so step functions integrate exactly.
pub fn normal_expectation<F: Fn(f64) -> f64>(f: F, breaks: &[f64]) -> f64 {
    const LIM: f64 = 12.0;
    let density = |w: f64| (-0.5 * w * w).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut cuts = vec![-LIM];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|b| b.abs() < LIM).collect();
    inner.sort_by(f64::total_cmp);
    cuts.extend(inner);
    cuts.push(LIM);
    let mut total = CompensatedSum::new();
    for pair in cuts.windows(2) {
        total.add(integrate(|w| f(w) * density(w), pair[0], pair[1], 0.25));
    }
    total.value()
}
