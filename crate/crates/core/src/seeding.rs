//! Deterministic child-seed derivation.
//!
//! A child seed is obtained by folding each key component into the master seed
//! with the splitmix64 finalizer: `s <- mix(s ^ mix(component))`. String
//! components are first hashed with 64-bit FNV-1a. The derivation depends only
//! on the components of a given key, so adding a new procedure or train size
//! leaves every other cell's randomness unchanged.

/// Splitmix64 output function applied to `x + golden gamma`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Int(u64),
    Name(&'a str),
}

impl From<u64> for SeedPart<'_> {
    fn from(v: u64) -> Self {
        SeedPart::Int(v)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(v: usize) -> Self {
        SeedPart::Int(v as u64)
    }
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(v: &'a str) -> Self {
        SeedPart::Name(v)
    }
}

pub fn derive_seed(master: u64, parts: &[SeedPart<'_>]) -> u64 {
    parts.iter().fold(splitmix64(master), |s, part| {
        let v = match *part {
            SeedPart::Int(i) => i,
            SeedPart::Name(name) => fnv1a(name),
        };
        splitmix64(s ^ splitmix64(v))
    })
}
