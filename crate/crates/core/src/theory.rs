//! One-dimensional ReLU sums and the breakpoint argument that unstructured
//! pruning is strictly more expressive than removing whole hidden units.
//!
//! A hidden unit is `a·relu(w·x + b)`, with its breakpoint at `τ = −b/w`.
//! Its first-layer parameters are `w` and `b`, so a unit with both nonzero
//! costs two nonzeros and an all-zero padding unit costs none.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::SCHEMA_VERSION;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub w: f64,
    pub b: f64,
    pub a: f64,
}

impl Unit {
    /// `a·relu(x − τ)`.
    pub fn hinge(a: f64, tau: f64) -> Self {
        Self { w: 1.0, b: -tau, a }
    }

    pub fn zero() -> Self {
        Self { w: 0.0, b: 0.0, a: 0.0 }
    }

    pub fn tau(&self) -> Option<f64> {
        (self.w != 0.0).then(|| -self.b / self.w)
    }

    fn act(&self, x: f64) -> f64 {
        (self.w * x + self.b).max(0.0)
    }
}

/// `g(x) = Σ a_j·relu(w_j·x + b_j) + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReluSum {
    pub units: Vec<Unit>,
    pub c: f64,
}

impl ReluSum {
    pub fn from_hinges(a: &[f64], tau: &[f64], c: f64) -> Result<Self> {
        if a.len() != tau.len() {
            return Err(Error::InvalidArgument(format!("{} weights vs {} breakpoints", a.len(), tau.len())));
        }
        if tau.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("breakpoints must be strictly increasing".into()));
        }
        Ok(Self { units: a.iter().zip(tau).map(|(&a, &t)| Unit::hinge(a, t)).collect(), c })
    }

    pub fn width(&self) -> usize {
        self.units.len()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.units.iter().map(|u| u.a * u.act(x)).sum::<f64>() + self.c
    }

    /// Nonzero first-layer parameters (`w` and `b` of every unit).
    pub fn first_layer_nonzeros(&self) -> usize {
        self.units.iter().map(|u| usize::from(u.w != 0.0) + usize::from(u.b != 0.0)).sum()
    }

    /// Same function, `extra` zero units wider.
    pub fn padded(&self, extra: usize) -> Self {
        let mut units = self.units.clone();
        units.extend(std::iter::repeat_n(Unit::zero(), extra));
        Self { units, c: self.c }
    }

    /// Breakpoints of units that actually bend the function, sorted and
    /// deduplicated.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.units.iter().filter(|u| u.a != 0.0).filter_map(Unit::tau).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    /// Exact slope at a point that is not a breakpoint.
    pub fn slope_at(&self, x: f64) -> f64 {
        self.units.iter().filter(|u| u.w * x + u.b > 0.0).map(|u| u.a * u.w).sum()
    }
}

/// Evaluation grid: `n` evenly spaced points on `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid {
    /// `[min τ − 1, max τ + 1]` with `50·width` points.
    pub fn default_for(f: &ReluSum) -> Self {
        let t = f.breakpoints();
        let (lo, hi) = match (t.first(), t.last()) {
            (Some(&a), Some(&b)) => (a - 1.0, b + 1.0),
            _ => (-1.0, 1.0),
        };
        Self { lo, hi, n: 50 * f.width().max(1) }
    }

    pub fn points(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        (0..self.n).map(|i| self.lo + i as f64 * step).collect()
    }

    fn check(&self, f: &ReluSum) -> Result<()> {
        if !(self.lo < self.hi) || self.n < 2 {
            return Err(Error::InvalidArgument(format!("degenerate grid {self:?}")));
        }
        if self.n < 10 * f.width() {
            return Err(Error::InvalidArgument(format!("grid of {} points is too coarse for width {}", self.n, f.width())));
        }
        if let Some(t) = f.breakpoints().into_iter().find(|&t| !(t > self.lo && t < self.hi)) {
            return Err(Error::InvalidArgument(format!("breakpoint {t} lies outside the grid [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

/// Width-`m` sum with breakpoints `1..=m`, weights `|a_j| ∈ [0.5, 2]` of
/// random sign, so every breakpoint changes the slope.
pub fn construct_gm(m: usize, seed: u64) -> Result<ReluSum> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..m)
        .map(|_| {
            let mag = rng.random_range(0.5..=2.0);
            if rng.random::<bool>() { mag } else { -mag }
        })
        .collect();
    let tau: Vec<f64> = (1..=m).map(|t| t as f64).collect();
    let c = rng.random_range(-1.0..1.0);
    ReluSum::from_hinges(&a, &tau, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PieceCount {
    pub analytic: usize,
    pub grid: usize,
}

/// Maximal intervals of constant slope, counted from the exact slopes
/// between breakpoints and cross-checked by finite differences on `grid`.
pub fn count_pieces(f: &ReluSum, grid: &Grid) -> Result<PieceCount> {
    grid.check(f)?;
    let t = f.breakpoints();
    let mut probes = Vec::with_capacity(t.len() + 1);
    probes.push(t.first().map_or(0.0, |x| x - 1.0));
    probes.extend(t.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    if let Some(x) = t.last() {
        probes.push(x + 1.0);
    }
    let slopes: Vec<f64> = probes.iter().map(|&x| f.slope_at(x)).collect();
    let analytic = 1 + slopes.windows(2).filter(|w| w[0] != w[1]).count();

    // a piece shows up on the grid as a run of at least two equal
    // finite-difference slopes; intervals straddling a breakpoint are
    // transitional and stand alone
    let xs = grid.points();
    let ys: Vec<f64> = xs.iter().map(|&x| f.eval(x)).collect();
    let fd: Vec<f64> = (1..xs.len()).map(|i| (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1])).collect();
    let scale = fd.iter().fold(1.0f64, |m, s| m.max(s.abs()));
    let same = |a: f64, b: f64| (a - b).abs() <= 1e-9 * scale;
    let mut runs: Vec<(f64, usize)> = Vec::new();
    for &s in &fd {
        match runs.last_mut() {
            Some((v, n)) if same(*v, s) => *n += 1,
            _ => runs.push((s, 1)),
        }
    }
    let mut grid_count = 0;
    let mut last: Option<f64> = None;
    for (s, n) in runs {
        if n >= 2 && last.is_none_or(|l| !same(l, s)) {
            grid_count += 1;
            last = Some(s);
        }
    }
    Ok(PieceCount { analytic, grid: grid_count })
}

/// Least squares `min ‖A·x − y‖₂` by Householder QR. Columns that are
/// numerically dependent on earlier ones get a zero coefficient.
fn least_squares(cols: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let (n, k) = (y.len(), cols.len());
    let mut a: Vec<Vec<f64>> = cols.to_vec();
    let mut r = y.to_vec();
    let mut diag = vec![0f64; k];
    let col_norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    for j in 0..k.min(n) {
        let norm = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * col_norms[j].max(1e-300) {
            diag[j] = 0.0;
            continue;
        }
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[j][j..].to_vec();
        v[0] -= alpha;
        let vn: f64 = v.iter().map(|x| x * x).sum();
        if vn == 0.0 {
            diag[j] = alpha;
            continue;
        }
        let reflect = |col: &mut [f64]| {
            let d: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum::<f64>() * 2.0 / vn;
            col.iter_mut().zip(&v).for_each(|(c, vi)| *c -= d * vi);
        };
        for col in a.iter_mut().skip(j) {
            reflect(&mut col[j..]);
        }
        reflect(&mut r[j..]);
        diag[j] = a[j][j];
    }
    let mut x = vec![0f64; k];
    for j in (0..k.min(n)).rev() {
        if diag[j] == 0.0 {
            continue;
        }
        let s: f64 = (j + 1..k).map(|i| a[i][j] * x[i]).sum();
        x[j] = (r[j] - s) / diag[j];
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredFit {
    pub approx: ReluSum,
    pub linf_error: f64,
}

/// Best width-`m_prime` approximation found by keeping whole units of `f`:
/// units are ranked by `|a·w|` times the length of the grid on which they
/// are active, each prefix of that ranking up to `m_prime` units is refit
/// (output weights and offset) by least squares on the grid, and the prefix
/// with the smallest L∞ error wins.
pub fn best_structured_fit(f: &ReluSum, m_prime: usize, grid: &Grid) -> Result<StructuredFit> {
    grid.check(f)?;
    if m_prime > f.width() {
        return Err(Error::InvalidArgument(format!("m_prime {m_prime} exceeds width {}", f.width())));
    }
    let xs = grid.points();
    let ys: Vec<f64> = xs.iter().map(|&x| f.eval(x)).collect();
    let support = |u: &Unit| xs.iter().filter(|&&x| u.act(x) > 0.0).count() as f64;
    let mut order: Vec<(usize, f64)> = f.units.iter().enumerate().map(|(i, u)| (i, (u.a * u.w).abs() * support(u))).collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

    let mut best: Option<StructuredFit> = None;
    for keep in 0..=m_prime {
        let kept: Vec<Unit> = order[..keep].iter().map(|&(i, _)| f.units[i]).collect();
        let mut cols: Vec<Vec<f64>> = kept.iter().map(|u| xs.iter().map(|&x| u.act(x)).collect()).collect();
        cols.push(vec![1.0; xs.len()]);
        let coef = least_squares(&cols, &ys);
        let units: Vec<Unit> = kept.iter().zip(&coef).map(|(u, &a)| Unit { a, ..*u }).collect();
        let approx = ReluSum { units, c: coef[keep] }.padded(m_prime - keep);
        let linf_error = xs.iter().zip(&ys).map(|(&x, y)| (approx.eval(x) - y).abs()).fold(0.0, f64::max);
        if best.as_ref().is_none_or(|b| linf_error < b.linf_error) {
            best = Some(StructuredFit { approx, linf_error });
        }
    }
    Ok(best.expect("keep = 0 always yields a fit"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema_version: u32,
    pub m: usize,
    pub m_prime: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// A width-`m_prime` sum padded with zero units to width `m` has the same
    /// nonzero count and the same values everywhere on the grid.
    pub embed_ok: bool,
    /// Analytic piece count of `g_m`.
    pub piece_count: usize,
    pub grid_piece_count: usize,
    pub gm_nonzeros: usize,
    pub struct_linf_error: f64,
}

/// Builds `g_m` at budget `K = 2m`, checks the zero-padding embedding of a
/// width-`m_prime` sum, and measures how far the best structured width-
/// `m_prime` fit stays from `g_m`.
pub fn inclusion_demo(m: usize, m_prime: usize, k: usize, seed: u64) -> Result<TheoryReport> {
    if m_prime == 0 || m_prime >= m {
        return Err(Error::InvalidArgument(format!("need 1 <= m_prime < m, got m_prime {m_prime}, m {m}")));
    }
    if k != 2 * m {
        return Err(Error::InvalidArgument(format!("budget K must be 2m = {}, got {k}", 2 * m)));
    }
    let g = construct_gm(m, seed)?;
    let grid = Grid::default_for(&g);
    let pieces = count_pieces(&g, &grid)?;

    let small = construct_gm(m_prime, seed.wrapping_add(1))?;
    let embedded = small.padded(m - m_prime);
    let xs = grid.points();
    let embed_ok = embedded.width() == m
        && embedded.first_layer_nonzeros() == small.first_layer_nonzeros()
        && embedded.first_layer_nonzeros() <= k
        && xs.iter().all(|&x| embedded.eval(x) - small.eval(x) == 0.0);

    let fit = best_structured_fit(&g, m_prime, &grid)?;
    Ok(TheoryReport {
        schema_version: SCHEMA_VERSION,
        m,
        m_prime,
        k,
        embed_ok,
        piece_count: pieces.analytic,
        grid_piece_count: pieces.grid,
        gm_nonzeros: g.first_layer_nonzeros(),
        struct_linf_error: fit.linf_error,
    })
}
