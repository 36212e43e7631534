//! Adaptive Gauss-Kronrod (7/15) quadrature with user breakpoints.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

fn gk15(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> Piece {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    let mut l1 = fc.abs() * WGK[7];
    for j in 0..7 {
        let dx = h * XGK[j];
        let (lo, hi) = (f(c - dx), f(c + dx));
        let s = lo + hi;
        kron += WGK[j] * s;
        l1 += WGK[j] * (lo.abs() + hi.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    Piece { a, b, value: kron * h, error: ((kron - gauss) * h).abs(), l1: l1 * h.abs() }
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    l1: f64,
}

/// Sum from both ends of the ordered list inward, so a mirrored integrand
/// over a mirrored interval yields a bitwise negated total.
fn symmetric_sum(pieces: &[Piece], field: impl Fn(&Piece) -> f64) -> f64 {
    let n = pieces.len();
    let mut s = 0.0;
    for i in 0..n / 2 {
        s += field(&pieces[i]) + field(&pieces[n - 1 - i]);
    }
    if n % 2 == 1 {
        s += field(&pieces[n / 2]);
    }
    s
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
    /// Measure the relative tolerance against `int |f|` instead of `|int f|`;
    /// needed when the integral cancels to zero.
    pub relative_to_l1: bool,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { abs_tol: 1e-12, rel_tol: 1e-10, max_intervals: 20_000, relative_to_l1: false }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

/// Integrate `f` over `[a, b]`, splitting first at the given interior points.
pub fn integrate(
    mut f: impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    opts: QuadOptions,
) -> Result<QuadResult> {
    if a == b {
        return Ok(QuadResult { value: 0.0, error: 0.0, intervals: 0 });
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut pts: Vec<f64> = breakpoints.iter().cloned().filter(|p| *p > lo && *p < hi).collect();
    pts.push(lo);
    pts.push(hi);
    pts.sort_by(f64::total_cmp);
    pts.dedup();

    // Kept ordered by position.
    let mut pieces: Vec<Piece> = pts.windows(2).map(|w| gk15(&mut f, w[0], w[1])).collect();
    loop {
        let total = symmetric_sum(&pieces, |p| p.value);
        let err = symmetric_sum(&pieces, |p| p.error);
        if !total.is_finite() || !err.is_finite() {
            return Err(Error::NonFinite("quadrature integrand".into()));
        }
        let scale = if opts.relative_to_l1 { symmetric_sum(&pieces, |p| p.l1) } else { total.abs() };
        if err <= opts.abs_tol.max(opts.rel_tol * scale) {
            return Ok(QuadResult { value: sign * total, error: err, intervals: pieces.len() });
        }
        if pieces.len() >= opts.max_intervals {
            return Err(Error::NonConvergence(format!(
                "quadrature error {err:e} after {} intervals (value {total:e})",
                pieces.len()
            )));
        }
        // Largest error first; ties go to the piece nearest the origin.
        let mut idx = 0;
        for (i, p) in pieces.iter().enumerate().skip(1) {
            let q = &pieces[idx];
            let (pm, qm) = ((p.a + p.b).abs(), (q.a + q.b).abs());
            if p.error > q.error || (p.error == q.error && pm < qm) {
                idx = i;
            }
        }
        // A mirror-image partner with the same error is split in the same
        // pass, so integrands odd or even about zero stay symmetric.
        let Piece { a: a0, b: b0, error: e0, .. } = pieces[idx];
        let partner = pieces.iter().position(|p| p.a == -b0 && p.b == -a0 && p.error == e0).filter(|j| *j != idx);
        let mut targets = vec![idx];
        targets.extend(partner);
        targets.sort_unstable_by(|x, y| y.cmp(x));
        for i in targets {
            let Piece { a: a0, b: b0, .. } = pieces[i];
            let m = 0.5 * (a0 + b0);
            if !(m > a0 && m < b0) {
                return Err(Error::NonConvergence("interval underflow in quadrature".into()));
            }
            let left = gk15(&mut f, a0, m);
            let right = gk15(&mut f, m, b0);
            pieces.splice(i..=i, [left, right]);
        }
    }
}
