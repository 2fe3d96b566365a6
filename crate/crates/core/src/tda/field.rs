use crate::error::{domain, Result};

/// Arithmetic in ℤ/p for a small prime p.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PrimeField {
    p: u32,
}

impl PrimeField {
    pub(crate) fn new(p: u32) -> Result<Self> {
        if p < 2 || p > 251 || (2..p).take_while(|d| d * d <= p).any(|d| p % d == 0) {
            return Err(domain(format!("field characteristic {p} is not a small prime")));
        }
        Ok(Self { p })
    }

    pub(crate) fn char(self) -> u32 {
        self.p
    }

    #[inline]
    pub(crate) fn add(self, a: u32, b: u32) -> u32 {
        (a + b) % self.p
    }

    #[inline]
    pub(crate) fn mul(self, a: u32, b: u32) -> u32 {
        (a * b) % self.p
    }

    #[inline]
    pub(crate) fn neg(self, a: u32) -> u32 {
        (self.p - a % self.p) % self.p
    }

    /// Multiplicative inverse of a non-zero element.
    #[inline]
    pub(crate) fn inv(self, a: u32) -> u32 {
        // Fermat: a^(p-2).
        let (mut base, mut exp, mut acc) = (a % self.p, self.p - 2, 1);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// `(-1)^k` as a field element.
    #[inline]
    pub(crate) fn sign(self, k: usize) -> u32 {
        if k % 2 == 0 {
            1
        } else {
            self.p - 1
        }
    }
}
