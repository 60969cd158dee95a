//! Cubic B-spline interpolation with exact prefiltering.
//!
//! Interpolation coefficients are obtained with the causal/anti-causal
//! recursive filter pair for the cubic B-spline pole `sqrt(3) - 2`, using
//! whole-sample mirror boundaries (`c b | a b c d | c b`).

pub(crate) const POLE: f64 = -0.267_949_192_431_122_7;

/// Whole-sample mirror of `m` into `0..n`.
#[inline]
pub(crate) fn mirror(m: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let r = m.rem_euclid(period);
    (if r < n as i64 { r } else { period - r }) as usize
}

/// Replaces `line` by its cubic B-spline interpolation coefficients.
pub(crate) fn prefilter(line: &mut [f64]) {
    let n = line.len();
    if n < 2 {
        return;
    }
    let z = POLE;
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    line.iter_mut().for_each(|c| *c *= gain);

    // Causal initialization: exact sum over the mirrored signal.
    let z_n1 = z.powi(n as i32 - 1);
    let mut zk = z;
    let mut z2n = z_n1 * z_n1 / z;
    let mut sum = line[0] + z_n1 * line[n - 1];
    for c in &line[1..n - 1] {
        sum += (zk + z2n) * c;
        zk *= z;
        z2n /= z;
    }
    line[0] = sum / (1.0 - z_n1 * z_n1);
    for k in 1..n {
        line[k] += z * line[k - 1];
    }

    line[n - 1] = (z / (z * z - 1.0)) * (line[n - 1] + z * line[n - 2]);
    for k in (0..n - 1).rev() {
        line[k] = z * (line[k + 1] - line[k]);
    }
}

/// Cubic B-spline basis.
#[inline]
pub(crate) fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Taps (mirrored coefficient indices and weights) for sampling at continuous index `x`.
pub(crate) fn taps(x: f64, n: usize) -> [(usize, f64); 4] {
    let base = x.floor() as i64;
    std::array::from_fn(|q| {
        let k = base - 1 + q as i64;
        (mirror(k, n), bspline3(x - k as f64))
    })
}
