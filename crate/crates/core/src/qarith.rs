//! Q16 fixed-point arithmetic.
//!
//! Every value is a signed 64-bit integer carrying 16 fractional bits. Products
//! widen to 128 bits before shifting back, so nothing wraps for in-range inputs.
//! The only floating-point use in this module is building the RoPE tables; the
//! result can be exported once and re-imported so that runtime never touches
//! `f64`.

use std::fmt;

use crate::error::{Error, Result};
use crate::wire::Reader;

pub const FRAC_BITS: u32 = 16;

/// Signed Q16 fixed-point number (`raw / 65536`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(transparent)]
pub struct Q16(pub i64);

impl Q16 {
    pub const ZERO: Q16 = Q16(0);
    pub const ONE: Q16 = Q16(1 << FRAC_BITS);

    #[inline]
    pub const fn from_raw(raw: i64) -> Self {
        Q16(raw)
    }

    #[inline]
    pub const fn raw(self) -> i64 {
        self.0
    }

    pub const fn from_int(v: i32) -> Self {
        Q16((v as i64) << FRAC_BITS)
    }

    /// Rounds half away from zero. Saturates at the `i64` range.
    pub fn from_f64(v: f64) -> Self {
        Q16((v * Q16::ONE.0 as f64).round() as i64)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / Q16::ONE.0 as f64
    }
}

impl fmt::Display for Q16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.to_f64())
    }
}

/// Integer division rounding half away from zero.
pub(crate) fn div_round(num: i128, den: i128) -> i128 {
    debug_assert!(den != 0);
    let q = num / den;
    let r = num % den;
    if 2 * r.abs() >= den.abs() {
        if (num < 0) == (den < 0) {
            q + 1
        } else {
            q - 1
        }
    } else {
        q
    }
}

#[inline]
pub(crate) fn saturate(v: i128) -> i64 {
    v.clamp(i64::MIN as i128, i64::MAX as i128) as i64
}

/// `round(num * 65536 / den)`, half away from zero.
pub fn q16_from_ratio(num: i64, den: i64) -> Result<Q16> {
    if den == 0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(Q16(saturate(div_round(
        (num as i128) << FRAC_BITS,
        den as i128,
    ))))
}

/// `(a * b) >> 16` with a 128-bit intermediate (arithmetic shift, rounds toward
/// negative infinity).
#[inline]
pub fn q16_mul(a: Q16, b: Q16) -> Q16 {
    Q16(saturate((a.0 as i128 * b.0 as i128) >> FRAC_BITS))
}

// Newton-Raphson runs with 40 fractional bits and rounds to Q16 once at the end.
const NR_FRAC: u32 = 40;

// Seed for leading-bit position e: 1/sqrt(2^(e - 16) * sqrt(2)), in Q40. The
// seed sits at the geometric midpoint of [2^(e-16), 2^(e-15)) so the starting
// relative error never exceeds 2^0.25 - 1.
const INV_SQRT_SEEDS: [i64; 64] = [
    236691298899613, 167366022499769, 118345649449807, 83683011249884,
    59172824724903, 41841505624942, 29586412362452, 20920752812471,
    14793206181226, 10460376406236, 7396603090613, 5230188203118,
    3698301545306, 2615094101559, 1849150772653, 1307547050779,
    924575386327, 653773525390, 462287693163, 326886762695,
    231143846582, 163443381347, 115571923291, 81721690674,
    57785961645, 40860845337, 28892980823, 20430422668,
    14446490411, 10215211334, 7223245206, 5107605667,
    3611622603, 2553802834, 1805811301, 1276901417,
    902905651, 638450708, 451452825, 319225354,
    225726413, 159612677, 112863206, 79806339,
    56431603, 39903169, 28215802, 19951585,
    14107901, 9975792, 7053950, 4987896,
    3526975, 2493948, 1763488, 1246974,
    881744, 623487, 440872, 311744,
    220436, 155872, 110218, 77936,
];

/// Inverse square root by three Newton-Raphson steps `y <- y(3 - x*y^2)/2`,
/// seeded from a 64-entry table keyed on the highest set bit of `x.raw`.
pub fn inv_sqrt_q16(x: Q16) -> Result<Q16> {
    if x.0 <= 0 {
        return Err(Error::NonPositiveInvSqrt(x.0));
    }
    let e = 63 - x.0.leading_zeros() as usize;
    let xr = x.0 as i128;
    let three = 3i128 << NR_FRAC;
    let mut y = INV_SQRT_SEEDS[e] as i128;
    for _ in 0..3 {
        // x*y first: y*y alone underflows for large x.
        let xy = (xr * y) >> FRAC_BITS;
        let xyy = (xy * y) >> NR_FRAC;
        y = (y * (three - xyy)) >> (NR_FRAC + 1);
    }
    let shift = NR_FRAC - FRAC_BITS;
    Ok(Q16(saturate((y + (1 << (shift - 1))) >> shift)))
}

pub const EXP_LUT_LEN: usize = 257;

/// `round(exp(-8 + i/32) * 65536)` for i in 0..=256.
pub const EXP_LUT: [i64; EXP_LUT_LEN] = [
    22, 23, 23, 24, 25, 26, 27, 27, 28, 29,
    30, 31, 32, 33, 34, 35, 36, 37, 39, 40,
    41, 42, 44, 45, 47, 48, 50, 51, 53, 54,
    56, 58, 60, 62, 64, 66, 68, 70, 72, 74,
    77, 79, 82, 84, 87, 90, 93, 95, 99, 102,
    105, 108, 112, 115, 119, 123, 127, 131, 135, 139,
    143, 148, 153, 157, 162, 168, 173, 178, 184, 190,
    196, 202, 209, 215, 222, 229, 236, 244, 252, 260,
    268, 276, 285, 294, 303, 313, 323, 333, 344, 355,
    366, 378, 390, 402, 415, 428, 442, 456, 470, 485,
    500, 516, 533, 550, 567, 585, 604, 623, 642, 663,
    684, 706, 728, 751, 775, 800, 825, 851, 878, 906,
    935, 964, 995, 1027, 1059, 1093, 1128, 1163, 1200, 1238,
    1278, 1318, 1360, 1403, 1448, 1494, 1541, 1590, 1641, 1693,
    1746, 1802, 1859, 1918, 1979, 2042, 2107, 2174, 2243, 2314,
    2387, 2463, 2541, 2622, 2705, 2791, 2879, 2971, 3065, 3162,
    3263, 3366, 3473, 3584, 3697, 3815, 3936, 4061, 4190, 4323,
    4460, 4601, 4747, 4898, 5054, 5214, 5380, 5550, 5726, 5908,
    6096, 6289, 6489, 6695, 6907, 7127, 7353, 7586, 7827, 8076,
    8332, 8596, 8869, 9151, 9441, 9741, 10050, 10369, 10698, 11038,
    11388, 11750, 12123, 12508, 12905, 13314, 13737, 14173, 14623, 15087,
    15566, 16060, 16570, 17096, 17639, 18199, 18776, 19372, 19987, 20622,
    21276, 21952, 22649, 23368, 24109, 24875, 25664, 26479, 27319, 28187,
    29081, 30005, 30957, 31940, 32954, 34000, 35079, 36192, 37341, 38527,
    39750, 41011, 42313, 43656, 45042, 46472, 47947, 49469, 51039, 52660,
    54331, 56056, 57835, 59671, 61565, 63520, 65536,
];

const EXP_STEP_SHIFT: u32 = 11; // 8 * ONE / 256 = 2048 raw per table step
pub const EXP_ARG_MAX: Q16 = Q16(8 << FRAC_BITS);

/// `exp(-t)` for `t` in `[0, 8]`, linearly interpolated between table entries.
pub fn exp_neg_lut(t: Q16) -> Result<Q16> {
    if t.0 < 0 || t.0 > EXP_ARG_MAX.0 {
        return Err(Error::ExpArgOutOfRange(t.0));
    }
    let idx = (t.0 >> EXP_STEP_SHIFT) as usize;
    let rem = t.0 & ((1 << EXP_STEP_SHIFT) - 1);
    let hi = EXP_LUT[EXP_LUT_LEN - 1 - idx];
    if rem == 0 {
        return Ok(Q16(hi));
    }
    let lo = EXP_LUT[EXP_LUT_LEN - 2 - idx];
    let drop = ((hi - lo) * rem + (1 << (EXP_STEP_SHIFT - 1))) >> EXP_STEP_SHIFT;
    Ok(Q16(hi - drop))
}

/// Logistic sigmoid. Negative inputs use the table directly; positive inputs
/// are `ONE - sigmoid(-x)`, so `sigmoid(x) + sigmoid(-x) == ONE` bit-exactly.
pub fn sigmoid_q16(x: Q16) -> Q16 {
    if x.0 > 0 {
        return Q16(Q16::ONE.0 - sigmoid_q16(Q16(-x.0)).0);
    }
    let t = Q16(x.0.saturating_neg().min(EXP_ARG_MAX.0));
    let e = exp_neg_lut(t).expect("argument clamped into table range").0 as i128;
    let one = Q16::ONE.0 as i128;
    Q16(div_round(e * one, one + e) as i64)
}

/// `x * sigmoid(x)`.
pub fn silu_q16(x: Q16) -> Q16 {
    q16_mul(x, sigmoid_q16(x))
}

const RTAB_MAGIC: &[u8; 4] = b"RTAB";
const RTAB_VERSION: u32 = 1;

/// Precomputed RoPE rotation tables, `[position][k]` row-major with
/// `k < d_head / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTables {
    theta_base: f64,
    max_ctx: usize,
    half_dim: usize,
    cos_tab: Vec<Q16>,
    sin_tab: Vec<Q16>,
}

impl RopeTables {
    pub fn build(theta_base: f64, d_head: usize, max_ctx: usize) -> Result<Self> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "d_head must be even and positive, got {d_head}"
            )));
        }
        if max_ctx == 0 {
            return Err(Error::InvalidArgument("max_ctx must be at least 1".into()));
        }
        if !(theta_base.is_finite() && theta_base > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "theta_base must be positive and finite, got {theta_base}"
            )));
        }
        let half_dim = d_head / 2;
        let freqs: Vec<f64> = (0..half_dim)
            .map(|k| theta_base.powf(-2.0 * k as f64 / d_head as f64))
            .collect();
        let mut cos_tab = Vec::with_capacity(max_ctx * half_dim);
        let mut sin_tab = Vec::with_capacity(max_ctx * half_dim);
        for pos in 0..max_ctx {
            for &freq in &freqs {
                let angle = pos as f64 * freq;
                cos_tab.push(Q16::from_f64(angle.cos()));
                sin_tab.push(Q16::from_f64(angle.sin()));
            }
        }
        Ok(Self {
            theta_base,
            max_ctx,
            half_dim,
            cos_tab,
            sin_tab,
        })
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    pub fn max_ctx(&self) -> usize {
        self.max_ctx
    }

    pub fn half_dim(&self) -> usize {
        self.half_dim
    }

    #[inline]
    pub fn cos(&self, pos: usize, k: usize) -> Q16 {
        self.cos_tab[pos * self.half_dim + k]
    }

    #[inline]
    pub fn sin(&self, pos: usize, k: usize) -> Q16 {
        self.sin_tab[pos * self.half_dim + k]
    }

    /// Serializes to the `RTAB` binary artifact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 16 * self.cos_tab.len());
        out.extend_from_slice(RTAB_MAGIC);
        out.extend_from_slice(&RTAB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.max_ctx as u32).to_le_bytes());
        out.extend_from_slice(&(self.half_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.theta_base.to_le_bytes());
        for v in self.cos_tab.iter().chain(&self.sin_tab) {
            out.extend_from_slice(&v.0.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(RTAB_MAGIC)?;
        let version = r.u32()?;
        if version != RTAB_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let max_ctx = r.u32()? as usize;
        let half_dim = r.u32()? as usize;
        let theta_base = r.f64()?;
        if max_ctx == 0 || half_dim == 0 {
            return Err(Error::InvalidArgument(
                "rope tables must have non-zero dimensions".into(),
            ));
        }
        let n = max_ctx
            .checked_mul(half_dim)
            .ok_or_else(|| Error::InvalidArgument("rope table size overflows".into()))?;
        let read_table = |r: &mut Reader| -> Result<Vec<Q16>> {
            (0..n).map(|_| r.i64().map(Q16)).collect()
        };
        let cos_tab = read_table(&mut r)?;
        let sin_tab = read_table(&mut r)?;
        r.finish()?;
        Ok(Self {
            theta_base,
            max_ctx,
            half_dim,
            cos_tab,
            sin_tab,
        })
    }
}
