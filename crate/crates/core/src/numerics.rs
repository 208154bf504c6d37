//! Dense linear-algebra and sampling kernels used by every other module.
//!
//! All operations are pure functions of their inputs (including the explicit
//! [`RngState`]), store values as `f32`, and accumulate reductions in `f64`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("argument out of range: {0}")]
    Argument(String),
}

/// Row-major 2D tensor of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Dimension(format!(
                "data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Counter-based deterministic generator (SplitMix64).
///
/// The state advances by a fixed odd constant and the output is a bijective
/// mix of the counter, so identical seeds and call sequences produce identical
/// streams on every platform. Floating-point draws are derived from the
/// integer stream only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    state: u64,
}

impl RngState {
    pub const ALGORITHM: &'static str = "splitmix64";

    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in the closed-open interval [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Multiply-shift bounded draw; bias is below 2^-53 for desk-scale n.
        ((self.next_u64() >> 11) as u128 * n as u128 >> 53) as u64
    }

    /// Standard normal draw via Box-Muller on two uniform draws.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64_open();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Derive an independent stream for a labelled sub-task.
    pub fn split(&mut self, label: u64) -> RngState {
        let s = self.next_u64();
        RngState::new(s ^ label.wrapping_mul(0xA24B_AED4_963E_E407))
    }
}

/// `c[i][j] = sum_k a[i][k] * b[k][j]`, accumulated in f64.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::Dimension(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for (k, &aik) in arow.iter().enumerate() {
            let brow = b.row(k);
            let aik = aik as f64;
            for (j, &bkj) in brow.iter().enumerate() {
                acc[j] += aik * bkj as f64;
            }
        }
        for j in 0..b.cols {
            out.data[i * b.cols + j] = acc[j] as f32;
        }
    }
    Ok(out)
}

/// Row-wise softmax with max-subtraction; `-inf` entries get probability 0.
///
/// A row consisting entirely of `-inf` has no mass to distribute and is an
/// error.
pub fn softmax_rows(x: &Tensor2D) -> Result<Tensor2D, NumericsError> {
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            return Err(NumericsError::Distribution(format!(
                "softmax row {i} has no finite entries"
            )));
        }
        let mut sum = 0.0f64;
        let mut exps = vec![0.0f64; x.cols];
        for (j, &v) in row.iter().enumerate() {
            let e = if v == f32::NEG_INFINITY { 0.0 } else { ((v - max) as f64).exp() };
            exps[j] = e;
            sum += e;
        }
        for j in 0..x.cols {
            out.data[i * x.cols + j] = (exps[j] / sum) as f32;
        }
    }
    Ok(out)
}

/// Sample an index with probability proportional to `probabilities[i]`.
pub fn multinomial(probabilities: &[f32], rng: &mut RngState) -> Result<usize, NumericsError> {
    let mut total = 0.0f64;
    for (i, &p) in probabilities.iter().enumerate() {
        if p < 0.0 || !p.is_finite() {
            return Err(NumericsError::Distribution(format!(
                "entry {i} is {p}, expected a finite nonnegative weight"
            )));
        }
        total += p as f64;
    }
    if total <= 0.0 {
        return Err(NumericsError::Distribution("zero total mass".into()));
    }
    let target = rng.next_f64() * total;
    let mut cum = 0.0f64;
    let mut last_nonzero = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
            cum += p as f64;
            if target < cum {
                return Ok(i);
            }
        }
    }
    // Rounding pushed the target past the final cumulative sum.
    Ok(last_nonzero)
}

/// I.i.d. standard Gumbel draws via `-ln(-ln(u))`, `u` uniform in (0, 1).
pub fn gumbel_sample(rows: usize, cols: usize, rng: &mut RngState) -> Tensor2D {
    let mut out = Tensor2D::zeros(rows, cols);
    for v in out.data.iter_mut() {
        let u = rng.next_f64_open();
        *v = (-(-u.ln()).ln()) as f32;
    }
    out
}

/// Indices of the `k` smallest scores, ties broken toward the lower index.
pub fn lowest_k_indices(scores: &[f32], k: usize) -> Result<Vec<usize>, NumericsError> {
    if k > scores.len() {
        return Err(NumericsError::Argument(format!(
            "k={} exceeds length {}",
            k,
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(rows: usize, cols: usize, rng: &mut RngState) -> Tensor2D {
        let data = (0..rows * cols).map(|_| rng.next_normal() as f32).collect();
        Tensor2D::new(rows, cols, data).unwrap()
    }

    /// Naive triple-loop reference for matmul.
    fn matmul_oracle(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
        let mut out = Tensor2D::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut acc = 0.0f64;
                for k in 0..a.cols {
                    acc += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                out.data[i * b.cols + j] = acc as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut rng = RngState::new(7);
        let m = random_tensor(3, 3, &mut rng);
        let id = Tensor2D::identity(3);
        assert_eq!(matmul(&id, &m).unwrap(), m);
    }

    #[test]
    fn matmul_zero() {
        let a = Tensor2D::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Tensor2D::zeros(2, 2);
        assert_eq!(matmul(&a, &z).unwrap(), z);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngState::new(11);
        let a = random_tensor(8, 8, &mut rng);
        let b = random_tensor(8, 8, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        for (g, w) in got.data.iter().zip(&want.data) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor2D::zeros(2, 3);
        let b = Tensor2D::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(NumericsError::Dimension(_))));
    }

    #[test]
    fn matmul_distributes_over_addition() {
        let mut rng = RngState::new(13);
        let a = random_tensor(4, 5, &mut rng);
        let b = random_tensor(5, 3, &mut rng);
        let c = random_tensor(5, 3, &mut rng);
        let bc = Tensor2D::new(
            5,
            3,
            b.data.iter().zip(&c.data).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let lhs = matmul(&a, &bc).unwrap();
        let ab = matmul(&a, &b).unwrap();
        let ac = matmul(&a, &c).unwrap();
        for (i, &v) in lhs.data.iter().enumerate() {
            assert!((v - (ab.data[i] + ac.data[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_symmetric_row() {
        let x = Tensor2D::new(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let p = softmax_rows(&x).unwrap();
        for &v in &p.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_large_values_no_overflow() {
        let x = Tensor2D::new(1, 2, vec![1000.0, 0.0]).unwrap();
        let p = softmax_rows(&x).unwrap();
        assert!(p.all_finite());
        assert!(p.data[0] > 0.999999);
        assert!(p.data[1] < 1e-6);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        let mut rng = RngState::new(17);
        let x = random_tensor(4, 9, &mut rng);
        let p = softmax_rows(&x).unwrap();
        for i in 0..x.rows {
            // 64-bit naive exp/sum oracle without max subtraction.
            let row = x.row(i);
            let sum: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                let want = (v as f64).exp() / sum;
                assert!((p.get(i, j) as f64 - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn softmax_neg_infinity_handling() {
        let x = Tensor2D::new(1, 3, vec![f32::NEG_INFINITY, 0.0, f32::NEG_INFINITY]).unwrap();
        let p = softmax_rows(&x).unwrap();
        assert_eq!(p.data, vec![0.0, 1.0, 0.0]);

        let all = Tensor2D::new(1, 2, vec![f32::NEG_INFINITY; 2]).unwrap();
        assert!(matches!(softmax_rows(&all), Err(NumericsError::Distribution(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = RngState::new(19);
        for _ in 0..20 {
            let x = random_tensor(3, 7, &mut rng);
            let p = softmax_rows(&x).unwrap();
            let shifted = Tensor2D::new(
                3,
                7,
                x.data.iter().map(|v| v + 3.25).collect(),
            )
            .unwrap();
            let q = softmax_rows(&shifted).unwrap();
            for i in 0..3 {
                let s: f64 = p.row(i).iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
                for j in 0..7 {
                    assert!((p.get(i, j) - q.get(i, j)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn multinomial_point_mass() {
        let mut rng = RngState::new(23);
        for _ in 0..10 {
            assert_eq!(multinomial(&[0.0, 1.0, 0.0], &mut rng).unwrap(), 1);
            assert_eq!(multinomial(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn multinomial_frequencies_within_binomial_interval() {
        let mut rng = RngState::new(29);
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            counts[multinomial(&[0.5, 0.5], &mut rng).unwrap()] += 1;
        }
        for &c in &counts {
            let f = c as f64 / 10_000.0;
            assert!((0.47..=0.53).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn multinomial_rejects_bad_input() {
        let mut rng = RngState::new(31);
        assert!(matches!(
            multinomial(&[0.5, -0.1], &mut rng),
            Err(NumericsError::Distribution(_))
        ));
        assert!(matches!(
            multinomial(&[0.0, 0.0], &mut rng),
            Err(NumericsError::Distribution(_))
        ));
    }

    #[test]
    fn multinomial_chi_square() {
        let probs = [0.1f32, 0.2, 0.3, 0.4];
        let mut rng = RngState::new(37);
        let n = 20_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[multinomial(&probs, &mut rng).unwrap()] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &p)| {
                let e = n as f64 * p as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // 99.9% critical value for 3 degrees of freedom.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn gumbel_mean_near_euler_mascheroni() {
        let mut rng = RngState::new(41);
        let g = gumbel_sample(100, 1000, &mut rng);
        let mean: f64 = g.data.iter().map(|&v| v as f64).sum::<f64>() / g.data.len() as f64;
        assert!((mean - 0.5772).abs() < 0.02, "mean = {mean}");
        assert!(g.all_finite());
    }

    #[test]
    fn gumbel_deterministic_given_seed() {
        let a = gumbel_sample(2, 8, &mut RngState::new(43));
        let b = gumbel_sample(2, 8, &mut RngState::new(43));
        assert_eq!(a, b);
    }

    #[test]
    fn lowest_k_basic() {
        assert_eq!(lowest_k_indices(&[5.0, 1.0, 3.0], 1).unwrap(), vec![1]);
        assert_eq!(lowest_k_indices(&[5.0, 1.0, 3.0], 0).unwrap(), Vec::<usize>::new());
        // Tie broken toward index 0.
        assert_eq!(lowest_k_indices(&[2.0, 2.0, 2.0, 1.0], 2).unwrap(), vec![3, 0]);
    }

    #[test]
    fn lowest_k_out_of_range() {
        assert!(matches!(
            lowest_k_indices(&[1.0], 2),
            Err(NumericsError::Argument(_))
        ));
    }

    #[test]
    fn lowest_k_partition_property() {
        let mut rng = RngState::new(47);
        for _ in 0..50 {
            let n = 1 + (rng.next_below(20) as usize);
            let scores: Vec<f32> = (0..n).map(|_| (rng.next_below(6)) as f32).collect();
            let k = rng.next_below(n as u64 + 1) as usize;
            let sel = lowest_k_indices(&scores, k).unwrap();
            assert_eq!(sel.len(), k);
            let mut uniq = sel.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), k);
            if k > 0 && k < n {
                let max_sel = sel.iter().map(|&i| scores[i]).fold(f32::MIN, f32::max);
                let min_un = (0..n)
                    .filter(|i| !sel.contains(i))
                    .map(|i| scores[i])
                    .fold(f32::MAX, f32::min);
                assert!(max_sel <= min_un);
            }
        }
    }

    #[test]
    fn rng_reproducible() {
        let mut a = RngState::new(99);
        let mut b = RngState::new(99);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = RngState::new(99);
        // Known first outputs of splitmix64 with seed 99 stay stable.
        let first = c.next_u64();
        let mut d = RngState::new(99);
        assert_eq!(first, d.next_u64());
    }

    #[test]
    fn open_interval_draws_are_finite_gumbel_inputs() {
        let mut rng = RngState::new(53);
        for _ in 0..10_000 {
            let u = rng.next_f64_open();
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
