//! Software emulation of bfloat16 and float16 rounding on top of `f64` storage.
//!
//! Values stay in `f64`; emulated modes round every produced value to the
//! nearest representable number of the target format (ties to even), with
//! gradual underflow and overflow to signed infinity.

use serde::{Deserialize, Serialize};

/// Numeric format a computation is carried out in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericMode {
    /// 64-bit reference arithmetic.
    #[default]
    Full,
    Bf16,
    Fp16,
}

impl NumericMode {
    pub const ALL: [NumericMode; 3] = [NumericMode::Full, NumericMode::Bf16, NumericMode::Fp16];

    /// Explicit fraction (mantissa) bits of the format.
    pub const fn fraction_bits(self) -> u32 {
        match self {
            NumericMode::Full => 52,
            NumericMode::Bf16 => 7,
            NumericMode::Fp16 => 10,
        }
    }

    pub const fn exponent_bits(self) -> u32 {
        match self {
            NumericMode::Full => 11,
            NumericMode::Bf16 => 8,
            NumericMode::Fp16 => 5,
        }
    }

    pub const fn is_full(self) -> bool {
        matches!(self, NumericMode::Full)
    }

    const fn max_exponent(self) -> i32 {
        (1 << (self.exponent_bits() - 1)) - 1
    }

    const fn min_normal_exponent(self) -> i32 {
        1 - self.max_exponent()
    }

    /// Largest finite magnitude, `(2 - 2^-p) * 2^emax`.
    pub fn max_finite(self) -> f64 {
        match self {
            NumericMode::Full => f64::MAX,
            _ => {
                let p = self.fraction_bits() as i32;
                (2.0 - pow2(-p)) * pow2(self.max_exponent())
            }
        }
    }

    /// Smallest positive subnormal, `2^(emin - p)`.
    pub fn min_subnormal(self) -> f64 {
        match self {
            NumericMode::Full => f64::from_bits(1),
            _ => pow2(self.min_normal_exponent() - self.fraction_bits() as i32),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NumericMode::Full => "full",
            NumericMode::Bf16 => "bf16",
            NumericMode::Fp16 => "fp16",
        }
    }
}

impl std::fmt::Display for NumericMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NumericMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(NumericMode::Full),
            "bf16" => Ok(NumericMode::Bf16),
            "fp16" => Ok(NumericMode::Fp16),
            other => Err(crate::error::invalid(format!("unknown numeric mode `{other}`"))),
        }
    }
}

/// Exact power of two for exponents inside the normal `f64` range.
fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Unbiased binary exponent of a positive finite value (`floor(log2 a)`),
/// clamped at the `f64` subnormal boundary.
fn binary_exponent(a: f64) -> i32 {
    let biased = ((a.to_bits() >> 52) & 0x7ff) as i32;
    if biased == 0 {
        -1023
    } else {
        biased - 1023
    }
}

/// Round `x` to the nearest value representable in `mode`, ties to even.
///
/// Magnitudes that round past the largest finite value become signed
/// infinity; NaN and infinities pass through unchanged.
pub fn quantize(x: f64, mode: NumericMode) -> f64 {
    if mode.is_full() || !x.is_finite() || x == 0.0 {
        return x;
    }
    let p = mode.fraction_bits() as i32;
    let a = x.abs();
    let e = binary_exponent(a).max(mode.min_normal_exponent());
    let quantum = pow2(e - p);
    let r = (a / quantum).round_ties_even() * quantum;
    let r = if r > mode.max_finite() { f64::INFINITY } else { r };
    r.copysign(x)
}

pub fn quantize_slice(xs: &mut [f64], mode: NumericMode) {
    if mode.is_full() {
        return;
    }
    for x in xs {
        *x = quantize(*x, mode);
    }
}

/// True when `x` survives a round trip through `mode` unchanged.
pub fn is_representable(x: f64, mode: NumericMode) -> bool {
    let q = quantize(x, mode);
    q == x || (q.is_nan() && x.is_nan())
}

pub fn qadd(a: f64, b: f64, mode: NumericMode) -> f64 {
    quantize(a + b, mode)
}

pub fn qmul(a: f64, b: f64, mode: NumericMode) -> f64 {
    quantize(a * b, mode)
}

/// `a * b + c` with a single rounding into `mode`.
pub fn qfma(a: f64, b: f64, c: f64, mode: NumericMode) -> f64 {
    quantize(a.mul_add(b, c), mode)
}

/// How a training step maps onto the emulated formats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedPrecisionPolicy {
    pub compute_mode: NumericMode,
    /// Keep weights and optimizer state in full precision.
    pub master_weights_full: bool,
    /// Round backward-pass outputs as well as forward ones.
    pub quantize_gradients: bool,
}

impl MixedPrecisionPolicy {
    pub const FULL: MixedPrecisionPolicy = MixedPrecisionPolicy {
        compute_mode: NumericMode::Full,
        master_weights_full: true,
        quantize_gradients: false,
    };

    /// Standard mixed precision: quantized compute, full master weights.
    pub fn mixed(mode: NumericMode) -> Self {
        MixedPrecisionPolicy {
            compute_mode: mode,
            master_weights_full: true,
            quantize_gradients: true,
        }
    }

    /// Everything, including stored weights, in the emulated format.
    pub fn pure(mode: NumericMode) -> Self {
        MixedPrecisionPolicy {
            compute_mode: mode,
            master_weights_full: false,
            quantize_gradients: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.compute_mode.is_full()
    }

    /// Mode applied to forward outputs.
    pub fn forward_mode(&self) -> NumericMode {
        self.compute_mode
    }

    /// Mode applied to backward outputs.
    pub fn backward_mode(&self) -> NumericMode {
        if self.quantize_gradients {
            self.compute_mode
        } else {
            NumericMode::Full
        }
    }

    /// Mode stored weights are rounded to after each update.
    pub fn weight_mode(&self) -> NumericMode {
        if self.master_weights_full {
            NumericMode::Full
        } else {
            self.compute_mode
        }
    }
}

/// bfloat16 rounding of an `f32` done on the bit pattern: add half an ulp
/// (plus the kept lsb for ties-to-even) and truncate the low 16 bits.
pub fn bf16_bits_reference(x: f32) -> u16 {
    let b = x.to_bits();
    if x.is_nan() {
        return ((b >> 16) as u16) | 0x0040;
    }
    let lsb = (b >> 16) & 1;
    (b.wrapping_add(0x7fff + lsb) >> 16) as u16
}

pub fn bf16_from_bits(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// One line of the precision conformance table.
#[derive(Clone, Debug, PartialEq)]
pub struct ConformanceCheck {
    pub name: String,
    pub expected: String,
    pub got: String,
    pub pass: bool,
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

fn scalar_check(name: &str, expected: f64, got: f64) -> ConformanceCheck {
    ConformanceCheck { name: name.into(), expected: format!("{expected:?}"), got: format!("{got:?}"), pass: same(expected, got) }
}

/// Low halves appended to every bf16 pattern: exact, below tie, tie, above tie.
const LOW_HALVES: [u32; 5] = [0x0000, 0x7fff, 0x8000, 0x8001, 0xc000];

/// Worked examples plus an exhaustive comparison of [`quantize`] against
/// [`bf16_bits_reference`] over all 2^16 bf16 patterns.
pub fn conformance_checks() -> Vec<ConformanceCheck> {
    use NumericMode::{Bf16, Fp16};
    let mut out = vec![
        scalar_check("qadd(256, 1, bf16)", 256.0, qadd(256.0, 1.0, Bf16)),
        scalar_check("qadd(256, 4, bf16)", 260.0, qadd(256.0, 4.0, Bf16)),
        scalar_check("quantize(70000, fp16)", f64::INFINITY, quantize(70000.0, Fp16)),
        scalar_check("quantize(-70000, fp16)", f64::NEG_INFINITY, quantize(-70000.0, Fp16)),
        scalar_check("quantize(65519, fp16)", 65504.0, quantize(65519.0, Fp16)),
        scalar_check("quantize(65520, fp16)", f64::INFINITY, quantize(65520.0, Fp16)),
        scalar_check("quantize(2^-24, fp16)", 2f64.powi(-24), quantize(2f64.powi(-24), Fp16)),
        scalar_check("quantize(2^-26, fp16)", 0.0, quantize(2f64.powi(-26), Fp16)),
        scalar_check("quantize(1 + 2^-8, bf16)", 1.0, quantize(1.0 + 2f64.powi(-8), Bf16)),
        scalar_check("quantize(1 + 3*2^-8, bf16)", 1.0 + 2f64.powi(-6), quantize(1.0 + 3.0 * 2f64.powi(-8), Bf16)),
    ];
    let mut round_trip_fail = 0usize;
    let mut rounding_fail = 0usize;
    let mut first_fail = None;
    for hi in 0..=u16::MAX {
        let exact = bf16_from_bits(hi) as f64;
        if !same(quantize(exact, Bf16), exact) {
            round_trip_fail += 1;
            first_fail.get_or_insert(hi as u32);
        }
        for low in LOW_HALVES {
            let x = f32::from_bits(((hi as u32) << 16) | low);
            let expected = bf16_from_bits(bf16_bits_reference(x)) as f64;
            if !same(quantize(x as f64, Bf16), expected) {
                rounding_fail += 1;
                first_fail.get_or_insert(((hi as u32) << 16) | low);
            }
        }
    }
    out.push(ConformanceCheck {
        name: "bf16 round trip, all 65536 patterns".into(),
        expected: "0 mismatches".into(),
        got: format!("{round_trip_fail} mismatches"),
        pass: round_trip_fail == 0,
    });
    out.push(ConformanceCheck {
        name: "bf16 rounding vs bit-level reference, 327680 f32 values".into(),
        expected: "0 mismatches".into(),
        got: match first_fail {
            Some(bits) if rounding_fail > 0 => format!("{rounding_fail} mismatches, first 0x{bits:08x}"),
            _ => format!("{rounding_fail} mismatches"),
        },
        pass: rounding_fail == 0,
    });
    out
}
