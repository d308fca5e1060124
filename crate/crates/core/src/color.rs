//! sRGB transfer functions and linear-light color.

use crate::scalar::Scalar;

/// Linear-light RGB triple in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinearColor<T> {
    pub r: T,
    pub g: T,
    pub b: T,
}

impl<T: Scalar> LinearColor<T> {
    pub fn new(r: T, g: T, b: T) -> Self {
        Self { r, g, b }
    }

    pub fn from_srgb(px: [u8; 3]) -> Self {
        Self::new(srgb_to_linear(px[0]), srgb_to_linear(px[1]), srgb_to_linear(px[2]))
    }

    pub fn to_srgb(self) -> [u8; 3] {
        [linear_to_srgb(self.r), linear_to_srgb(self.g), linear_to_srgb(self.b)]
    }

    pub fn to_array(self) -> [T; 3] {
        [self.r, self.g, self.b]
    }

    pub fn from_array(c: [T; 3]) -> Self {
        Self::new(c[0], c[1], c[2])
    }

    pub fn clamped(self) -> Self {
        let c = |v: T| v.max(T::zero()).min(T::one());
        Self::new(c(self.r), c(self.g), c(self.b))
    }

    pub fn is_finite(&self) -> bool {
        self.r.is_finite() && self.g.is_finite() && self.b.is_finite()
    }
}

/// sRGB electro-optical transfer for one 8-bit code value.
#[inline]
pub fn srgb_to_linear<T: Scalar>(u: u8) -> T {
    let c = T::from_count(u as usize) / T::lit(255.0);
    if c <= T::lit(0.04045) {
        c / T::lit(12.92)
    } else {
        ((c + T::lit(0.055)) / T::lit(1.055)).powf(T::lit(2.4))
    }
}

/// Inverse transfer, clamped to `[0, 1]`, rounded half-up to 8 bits.
#[inline]
pub fn linear_to_srgb<T: Scalar>(v: T) -> u8 {
    let v = if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) };
    let c = if v <= T::lit(0.0031308) {
        v * T::lit(12.92)
    } else {
        T::lit(1.055) * v.powf(T::one() / T::lit(2.4)) - T::lit(0.055)
    };
    let code = (c * T::lit(255.0) + T::lit(0.5)).floor();
    code.max(T::zero()).min(T::lit(255.0)).to_u8().unwrap_or(0)
}

/// 256-entry decode table, for hot loops over many pixels.
pub fn srgb_lut<T: Scalar>() -> [T; 256] {
    std::array::from_fn(|u| srgb_to_linear(u as u8))
}
