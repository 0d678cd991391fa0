//! Finite scalar quantization onto fixed per-dimension grids, and mixed-radix
//! packing of per-dimension codes into one composite index per stage.
//!
//! Grid for `L` levels: `{2i/(L-1) - 1 : i = 0..L}`, uniformly spaced on
//! [-1, 1]. Inputs are hard-clamped to [-1, 1]; exact midpoints round to the
//! higher code. Dimension 0 is the least significant digit of the composite
//! index, so the emotion sub-index is `index % emotion_radix` and the acoustic
//! sub-index is `index / emotion_radix`.

use crate::error::{Error, Result};

/// Composite per-stage token index.
pub type Token = u32;

/// Per-dimension level counts plus the size of the leading (emotion) partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSpec {
    levels: Vec<u32>,
    emotion_dims: usize,
    codes_per_stage: u64,
    emotion_radix: u64,
}

impl LevelSpec {
    pub fn new(levels: Vec<u32>, emotion_dims: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidConfig("level list is empty".into()));
        }
        if let Some(&l) = levels.iter().find(|&&l| l < 2) {
            return Err(Error::InvalidConfig(format!(
                "every dimension needs at least 2 levels, found {l}"
            )));
        }
        if emotion_dims > levels.len() {
            return Err(Error::InvalidConfig(format!(
                "emotion_dims {emotion_dims} exceeds {} levels",
                levels.len()
            )));
        }
        let product = |ls: &[u32]| {
            ls.iter()
                .try_fold(1u64, |acc, &l| acc.checked_mul(u64::from(l)))
        };
        let codes_per_stage = product(&levels)
            .filter(|&c| c <= u64::from(Token::MAX) + 1)
            .ok_or_else(|| {
                Error::InvalidConfig(format!("code space of {levels:?} exceeds 2^32"))
            })?;
        let emotion_radix = product(&levels[..emotion_dims]).unwrap();
        Ok(Self {
            levels,
            emotion_dims,
            codes_per_stage,
            emotion_radix,
        })
    }

    /// `[2,2,2,4,4,4,4,4,4]` with three emotion dimensions.
    pub fn standard() -> Self {
        Self::new(vec![2, 2, 2, 4, 4, 4, 4, 4, 4], 3).unwrap()
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn dims(&self) -> usize {
        self.levels.len()
    }

    pub fn emotion_dims(&self) -> usize {
        self.emotion_dims
    }

    pub fn acoustic_dims(&self) -> usize {
        self.levels.len() - self.emotion_dims
    }

    pub fn codes_per_stage(&self) -> u64 {
        self.codes_per_stage
    }

    /// Π of the emotion-dimension level counts.
    pub fn emotion_radix(&self) -> u64 {
        self.emotion_radix
    }

    pub fn acoustic_radix(&self) -> u64 {
        self.codes_per_stage / self.emotion_radix
    }

    pub fn bits_per_stage(&self) -> f64 {
        log2_exact(self.codes_per_stage)
    }

    pub fn emotion_bits(&self) -> f64 {
        log2_exact(self.emotion_radix)
    }

    pub fn acoustic_bits(&self) -> f64 {
        log2_exact(self.acoustic_radix())
    }

    pub fn quantize_vector(&self, z: &[f64]) -> Result<(Vec<u32>, Vec<f64>)> {
        self.check_len(z.len())?;
        let mut codes = vec![0; z.len()];
        let mut values = vec![0.0; z.len()];
        for (j, &x) in z.iter().enumerate() {
            let (c, v) = quantize_dim(x, self.levels[j])?;
            codes[j] = c;
            values[j] = v;
        }
        Ok((codes, values))
    }

    /// Quantize in place into caller buffers; shapes are the caller's problem.
    pub(crate) fn quantize_into(&self, z: &[f64], codes: &mut [u32], values: &mut [f64]) -> Result<()> {
        for (j, &x) in z.iter().enumerate() {
            let (c, v) = quantize_dim(x, self.levels[j])?;
            codes[j] = c;
            values[j] = v;
        }
        Ok(())
    }

    pub fn pack_index(&self, codes: &[u32]) -> Result<Token> {
        self.check_len(codes.len())?;
        let mut index = 0u64;
        for (&c, &l) in codes.iter().zip(&self.levels).rev() {
            if c >= l {
                return Err(Error::OutOfRange {
                    what: "code",
                    value: u64::from(c),
                    limit: u64::from(l),
                });
            }
            index = index * u64::from(l) + u64::from(c);
        }
        Ok(index as Token)
    }

    pub fn unpack_index(&self, index: Token) -> Result<Vec<u32>> {
        let mut codes = vec![0; self.levels.len()];
        self.unpack_into(index, &mut codes)?;
        Ok(codes)
    }

    pub(crate) fn unpack_into(&self, index: Token, codes: &mut [u32]) -> Result<()> {
        self.check_token(index)?;
        let mut rest = index;
        for (c, &l) in codes.iter_mut().zip(&self.levels) {
            *c = rest % l;
            rest /= l;
        }
        Ok(())
    }

    pub fn codes_to_values(&self, codes: &[u32]) -> Result<Vec<f64>> {
        self.check_len(codes.len())?;
        codes
            .iter()
            .zip(&self.levels)
            .map(|(&c, &l)| code_value(c, l))
            .collect()
    }

    pub fn check_token(&self, index: Token) -> Result<()> {
        if u64::from(index) >= self.codes_per_stage {
            return Err(Error::OutOfRange {
                what: "token",
                value: u64::from(index),
                limit: self.codes_per_stage,
            });
        }
        Ok(())
    }

    pub fn emotion_subindex(&self, index: Token) -> u64 {
        u64::from(index) % self.emotion_radix
    }

    pub fn acoustic_subindex(&self, index: Token) -> u64 {
        u64::from(index) / self.emotion_radix
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.levels.len() {
            return Err(Error::Shape(format!(
                "expected {} dimensions, got {n}",
                self.levels.len()
            )));
        }
        Ok(())
    }
}

/// Nearest grid point to `clamp(x, -1, 1)` on the `levels`-point grid.
pub fn quantize_dim(x: f64, levels: u32) -> Result<(u32, f64)> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("FSQ input {x}")));
    }
    if levels < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 levels, got {levels}")));
    }
    let top = f64::from(levels - 1);
    let pos = (x.clamp(-1.0, 1.0) + 1.0) * 0.5 * top;
    let code = ((pos + 0.5).floor() as u32).min(levels - 1);
    Ok((code, grid_value(code, levels)))
}

/// Grid value of `code`; shared by quantization and decoding so both paths
/// produce bit-identical values.
#[inline]
fn grid_value(code: u32, levels: u32) -> f64 {
    2.0 * f64::from(code) / f64::from(levels - 1) - 1.0
}

pub fn code_value(code: u32, levels: u32) -> Result<f64> {
    if code >= levels {
        return Err(Error::OutOfRange {
            what: "code",
            value: u64::from(code),
            limit: u64::from(levels),
        });
    }
    Ok(grid_value(code, levels))
}

/// log2 that is exact for powers of two.
pub fn log2_exact(n: u64) -> f64 {
    if n.is_power_of_two() {
        f64::from(n.trailing_zeros())
    } else {
        (n as f64).log2()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_dim_examples() {
        assert_eq!(quantize_dim(0.0, 3).unwrap(), (1, 0.0));
        assert_eq!(quantize_dim(5.0, 2).unwrap(), (1, 1.0));
        let (c, v) = quantize_dim(0.2, 4).unwrap();
        assert_eq!(c, 2);
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert!(quantize_dim(f64::NAN, 3).is_err());
        assert_eq!(quantize_dim(-7.0, 4).unwrap(), (0, -1.0));
    }

    #[test]
    fn quantize_vector_examples() {
        let spec = LevelSpec::new(vec![3, 3], 1).unwrap();
        assert_eq!(spec.quantize_vector(&[0.0, 0.0]).unwrap(), (vec![1, 1], vec![0.0, 0.0]));
        assert_eq!(
            spec.quantize_vector(&[0.4, -0.9]).unwrap(),
            (vec![1, 0], vec![0.0, -1.0])
        );
        assert!(spec.quantize_vector(&[0.0]).is_err());

        // Ties on even grids resolve toward the higher code.
        let standard = LevelSpec::standard();
        let (codes, _) = standard.quantize_vector(&[0.0; 9]).unwrap();
        assert_eq!(codes, vec![1, 1, 1, 2, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn standard_code_space() {
        let spec = LevelSpec::standard();
        assert_eq!(spec.codes_per_stage(), 32_768);
        assert_eq!(spec.bits_per_stage(), 15.0);
        assert_eq!(spec.emotion_bits(), 3.0);
        assert_eq!(spec.acoustic_bits(), 12.0);
    }

    #[test]
    fn pack_examples() {
        let spec = LevelSpec::standard();
        assert_eq!(spec.pack_index(&[0; 9]).unwrap(), 0);
        let idx = spec.pack_index(&[1, 0, 1, 3, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(idx, 29);
        assert_eq!(spec.emotion_subindex(idx), 5);
        assert_eq!(spec.acoustic_subindex(idx), 3);
        assert_eq!(spec.pack_index(&[1, 1, 1, 3, 3, 3, 3, 3, 3]).unwrap(), 32_767);
        assert!(matches!(
            spec.pack_index(&[2, 0, 0, 0, 0, 0, 0, 0, 0]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn unpack_examples() {
        let spec = LevelSpec::standard();
        assert_eq!(spec.unpack_index(0).unwrap(), vec![0; 9]);
        assert_eq!(spec.unpack_index(29).unwrap(), vec![1, 0, 1, 3, 0, 0, 0, 0, 0]);
        assert!(matches!(spec.unpack_index(32_768), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn codes_to_values_examples() {
        let s = LevelSpec::new(vec![2, 2], 1).unwrap();
        assert_eq!(s.codes_to_values(&[0, 1]).unwrap(), vec![-1.0, 1.0]);
        let s = LevelSpec::new(vec![4], 0).unwrap();
        let v = s.codes_to_values(&[2]).unwrap();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        let s = LevelSpec::new(vec![3], 0).unwrap();
        assert_eq!(s.codes_to_values(&[1]).unwrap(), vec![0.0]);
        assert!(s.codes_to_values(&[3]).is_err());
    }

    #[test]
    fn binary_grid_excludes_zero() {
        assert_eq!(code_value(0, 2).unwrap(), -1.0);
        assert_eq!(code_value(1, 2).unwrap(), 1.0);
    }

    #[test]
    fn invalid_specs() {
        assert!(LevelSpec::new(vec![], 0).is_err());
        assert!(LevelSpec::new(vec![1, 4], 0).is_err());
        assert!(LevelSpec::new(vec![2, 4], 3).is_err());
        assert!(LevelSpec::new(vec![65536, 65536, 2], 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn spec_and_codes() -> impl Strategy<Value = (LevelSpec, Vec<u32>)> {
            prop::collection::vec(2u32..9, 1..8).prop_flat_map(|levels| {
                let n = levels.len();
                let codes = levels.iter().map(|&l| 0..l).collect::<Vec<_>>();
                (Just(levels), 0..=n, codes)
                    .prop_map(|(l, fe, c)| (LevelSpec::new(l, fe).unwrap(), c))
            })
        }

        proptest! {
            #[test]
            fn pack_unpack_round_trip((spec, codes) in spec_and_codes()) {
                let idx = spec.pack_index(&codes).unwrap();
                prop_assert_eq!(spec.unpack_index(idx).unwrap(), codes.clone());
                // Sub-indices only see their own partition.
                let fe = spec.emotion_dims();
                let emo_only = LevelSpec::new(spec.levels()[..fe].to_vec(), fe);
                if fe > 0 {
                    let e = emo_only.unwrap().pack_index(&codes[..fe]).unwrap();
                    prop_assert_eq!(spec.emotion_subindex(idx), u64::from(e));
                }
            }

            #[test]
            fn grid_points_are_fixed_points((spec, codes) in spec_and_codes()) {
                let values = spec.codes_to_values(&codes).unwrap();
                let (again, v2) = spec.quantize_vector(&values).unwrap();
                prop_assert_eq!(again, codes);
                prop_assert_eq!(v2, values);
            }

            #[test]
            fn bounded(x in -10.0f64..10.0, l in 2u32..17) {
                let (c, v) = quantize_dim(x, l).unwrap();
                prop_assert!(c < l);
                prop_assert!((-1.0..=1.0).contains(&v));
                // Nearest: no other grid point is strictly closer.
                let xc = x.clamp(-1.0, 1.0);
                for i in 0..l {
                    prop_assert!((code_value(i, l).unwrap() - xc).abs() >= (v - xc).abs() - 1e-12);
                }
            }
        }
    }
}
