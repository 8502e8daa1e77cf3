//! Region selection: the selector, label masks, guide-mask construction and
//! the cross-shaped mask extension.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, ImageTensor, ParsingMap, MAX_LABEL};

/// 19-class face-parsing label names, indexed by code.
pub const LABEL_NAMES: [&str; 19] = [
    "background",
    "skin",
    "l_brow",
    "r_brow",
    "l_eye",
    "r_eye",
    "eye_glasses",
    "l_ear",
    "r_ear",
    "earring",
    "nose",
    "mouth",
    "u_lip",
    "l_lip",
    "neck",
    "necklace",
    "cloth",
    "hair",
    "hat",
];

pub fn label_code(name: &str) -> Option<u8> {
    LABEL_NAMES.iter().position(|n| *n == name).map(|p| p as u8)
}

/// Which labels are guided in breakage regions, which count as skin for
/// coloring, and which are never guided.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSets {
    pub guide: BTreeSet<u8>,
    pub skin: BTreeSet<u8>,
    pub exclude: BTreeSet<u8>,
}

impl Default for LabelSets {
    fn default() -> Self {
        Self {
            guide: [0, 1, 17].into(),
            skin: [1, 14].into(),
            exclude: [2, 3, 4, 5, 10, 11, 12, 13].into(),
        }
    }
}

impl LabelSets {
    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("guide", &self.guide), ("skin", &self.skin), ("exclude", &self.exclude)] {
            if let Some(bad) = set.iter().find(|&&c| c > MAX_LABEL) {
                return Err(Error::config(
                    format!("labels.{name}"),
                    format!("label code {bad} outside 0..={MAX_LABEL}"),
                ));
            }
        }
        if let Some(c) = self.guide.intersection(&self.exclude).next() {
            return Err(Error::config(
                "labels.guide",
                format!("label {c} is both guided and excluded"),
            ));
        }
        Ok(())
    }
}

/// Zeroes every pixel outside `mask`, in all channels.
pub fn select<S: Scalar>(img: &ImageTensor<S>, mask: &BinaryMask) -> Result<ImageTensor<S>> {
    img.ensure_mask_fits(mask, "select")?;
    let n = img.pixel_count();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| if mask.data()[k % n] { v } else { S::zero() })
        .collect();
    let (c, h, w) = img.shape();
    Ok(ImageTensor::from_parts(c, h, w, data))
}

pub fn labels_to_mask(map: &ParsingMap, labels: &BTreeSet<u8>) -> BinaryMask {
    let data = map.data().iter().map(|c| labels.contains(c)).collect();
    BinaryMask::new(map.height(), map.width(), data).expect("parsing map dims are valid")
}

/// `M_guide = M AND labels(P, guide)`.
pub fn make_guide_mask(m: &BinaryMask, map: &ParsingMap, sets: &LabelSets) -> Result<BinaryMask> {
    m.ensure_fits(map.height(), map.width(), "guide mask")?;
    let mut guide = labels_to_mask(map, &sets.guide);
    if !sets.exclude.is_empty() {
        guide = guide.and(&labels_to_mask(map, &sets.exclude).not())?;
    }
    m.and(&guide)
}

/// Dilation by a plus-shaped element of the given radius, clipped at borders.
pub fn extend_mask(m: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return m.clone();
    }
    let (h, w) = (m.height(), m.width());
    let src = m.data();
    let mut out = vec![false; h * w];

    // horizontal pass via running prefix counts per row
    let mut prefix = vec![0usize; w.max(h) + 1];
    for i in 0..h {
        for j in 0..w {
            prefix[j + 1] = prefix[j] + usize::from(src[i * w + j]);
        }
        for j in 0..w {
            let lo = j.saturating_sub(radius);
            let hi = (j + radius + 1).min(w);
            if prefix[hi] > prefix[lo] {
                out[i * w + j] = true;
            }
        }
    }
    for j in 0..w {
        for i in 0..h {
            prefix[i + 1] = prefix[i] + usize::from(src[i * w + j]);
        }
        for i in 0..h {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(h);
            if prefix[hi] > prefix[lo] {
                out[i * w + j] = true;
            }
        }
    }
    BinaryMask::new(h, w, out).expect("same dims as input")
}

/// Default extension radius: 3 px at 512 rows, scaled linearly with height.
pub fn default_radius(height: usize) -> usize {
    (3.0 * height as f64 / 512.0).round() as usize
}

/// A region view: the selected image plus the mask it was selected with.
#[derive(Debug, Clone, PartialEq)]
pub struct Region<S> {
    pub image: ImageTensor<S>,
    pub mask: BinaryMask,
}

impl<S: Scalar> Region<S> {
    pub fn new(img: &ImageTensor<S>, mask: &BinaryMask) -> Result<Self> {
        Ok(Self {
            image: select(img, mask)?,
            mask: mask.clone(),
        })
    }
}

/// Every mask the guidance losses need, derived once from `(M, P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    /// Scratch / breakage mask `M`.
    pub scratch: BinaryMask,
    /// `1 - M`: where the fidelity term applies.
    pub valid: BinaryMask,
    pub guide: BinaryMask,
    /// `E(M_guide)`: where the smoothness term applies.
    pub guide_ext: BinaryMask,
    pub skin: BinaryMask,
}

impl RegionMasks {
    pub fn build(m: &BinaryMask, map: &ParsingMap, sets: &LabelSets, radius: usize) -> Result<Self> {
        let guide = make_guide_mask(m, map, sets)?;
        Ok(Self {
            scratch: m.clone(),
            valid: m.not(),
            guide_ext: extend_mask(&guide, radius),
            guide,
            skin: labels_to_mask(map, &sets.skin),
        })
    }
}

/// Pseudo-label regions used as guidance targets.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBundle<S> {
    /// Fidelity target, valid on `1 - M`.
    pub y_c: Region<S>,
    /// Smoothness target, valid on `E(M_guide)`.
    pub y_n: Region<S>,
    /// Color reference, valid on the skin mask.
    pub y_p_skin: Region<S>,
}

impl<S: Scalar> RegionBundle<S> {
    pub fn build(fidelity_source: &ImageTensor<S>, pseudo_label: &ImageTensor<S>, masks: &RegionMasks) -> Result<Self> {
        fidelity_source.ensure_same_shape(pseudo_label, "region bundle sources")?;
        Ok(Self {
            y_c: Region::new(fidelity_source, &masks.valid)?,
            y_n: Region::new(pseudo_label, &masks.guide_ext)?,
            y_p_skin: Region::new(pseudo_label, &masks.skin)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p)).unwrap()
    }

    fn dilate_oracle(m: &BinaryMask, r: usize) -> BinaryMask {
        let (h, w) = (m.height() as isize, m.width() as isize);
        BinaryMask::from_fn(m.height(), m.width(), |i, j| {
            let (i, j) = (i as isize, j as isize);
            (0..=r as isize).any(|k| {
                [(i - k, j), (i + k, j), (i, j - k), (i, j + k)]
                    .iter()
                    .any(|&(a, b)| a >= 0 && a < h && b >= 0 && b < w && m.get(a as usize, b as usize))
            })
        })
        .unwrap()
    }

    #[test]
    fn select_identity_and_annihilation() {
        let img = ImageTensor::<f64>::from_fn(3, 2, 2, |c, i, j| (c + i + j) as f64 * 0.1).unwrap();
        assert_eq!(select(&img, &BinaryMask::ones(2, 2).unwrap()).unwrap(), img);
        assert!(select(&img, &BinaryMask::zeros(2, 2).unwrap())
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(select(&img, &BinaryMask::zeros(3, 2).unwrap()).is_err());
    }

    #[test]
    fn select_checkerboard_matches_loop() {
        let img = ImageTensor::<f64>::from_fn(3, 4, 5, |c, i, j| 1.0 + (c * 20 + i * 5 + j) as f64).unwrap();
        let mask = BinaryMask::from_fn(4, 5, |i, j| (i + j) % 2 == 0).unwrap();
        let out = select(&img, &mask).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let expected = if (i + j) % 2 == 0 { img.get(c, i, j) } else { 0.0 };
                    assert_eq!(out.get(c, i, j), expected);
                }
            }
        }
    }

    #[test]
    fn labels_to_mask_cases() {
        let map = ParsingMap::new(1, 3, vec![0, 1, 4]).unwrap();
        let all: BTreeSet<u8> = (0..=18).collect();
        assert_eq!(labels_to_mask(&map, &all).count(), 3);
        assert!(labels_to_mask(&map, &BTreeSet::new()).is_empty());
        assert_eq!(labels_to_mask(&map, &[1].into()).data(), &[false, true, false]);
    }

    #[test]
    fn guide_mask_cases() {
        let sets = LabelSets::default();
        let ones = BinaryMask::ones(3, 3).unwrap();
        let skin = ParsingMap::filled(3, 3, 1).unwrap();
        assert_eq!(make_guide_mask(&ones, &skin, &sets).unwrap(), ones);
        let eyes = ParsingMap::filled(3, 3, 4).unwrap();
        assert!(make_guide_mask(&ones, &eyes, &sets).unwrap().is_empty());
    }

    #[test]
    fn guide_mask_matches_brute_force_and() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sets = LabelSets::default();
        for _ in 0..20 {
            let m = random_mask(&mut rng, 9, 7, 0.5);
            let map = ParsingMap::from_fn(9, 7, |_, _| rng.random_range(0..=18)).unwrap();
            let g = make_guide_mask(&m, &map, &sets).unwrap();
            for i in 0..9 {
                for j in 0..7 {
                    assert_eq!(g.get(i, j), m.get(i, j) && sets.guide.contains(&map.get(i, j)));
                }
            }
            assert!(g.is_subset_of(&m));
            assert!(g.and(&labels_to_mask(&map, &sets.exclude)).unwrap().is_empty());
        }
    }

    #[test]
    fn single_pixel_radius_one_is_plus() {
        let mut m = BinaryMask::zeros(5, 5).unwrap();
        m = BinaryMask::from_fn(5, 5, |i, j| (i, j) == (2, 2) || m.get(i, j)).unwrap();
        let e = extend_mask(&m, 1);
        assert_eq!(e.count(), 5);
        for (i, j) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!(e.get(i, j));
        }
        assert_eq!(extend_mask(&m, 0), m);
    }

    #[test]
    fn extension_matches_neighbourhood_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for r in 0..5 {
            let m = random_mask(&mut rng, 16, 16, 0.08);
            assert_eq!(extend_mask(&m, r), dilate_oracle(&m, r));
        }
    }

    #[test]
    fn default_radius_scales_with_height() {
        assert_eq!(default_radius(512), 3);
        assert_eq!(default_radius(1024), 6);
        assert_eq!(default_radius(256), 2);
        assert_eq!(default_radius(32), 0);
    }

    #[test]
    fn label_sets_validation() {
        assert!(LabelSets::default().validate().is_ok());
        let mut bad = LabelSets::default();
        bad.guide.insert(4);
        assert!(bad.validate().is_err());
        let mut bad = LabelSets::default();
        bad.skin.insert(30);
        assert!(bad.validate().is_err());
        assert_eq!(label_code("hair"), Some(17));
    }

    proptest! {
        #[test]
        fn extension_is_extensive_monotone_and_composes(
            bits in proptest::collection::vec(any::<bool>(), 100),
            extra in proptest::collection::vec(any::<bool>(), 100),
            r in 0usize..4, s in 0usize..4,
        ) {
            let m = BinaryMask::new(10, 10, bits).unwrap();
            let bigger = m.or(&BinaryMask::new(10, 10, extra).unwrap()).unwrap();
            prop_assert!(m.is_subset_of(&extend_mask(&m, r)));
            prop_assert!(extend_mask(&m, r).is_subset_of(&extend_mask(&bigger, r)));
            let composed = extend_mask(&extend_mask(&m, r), s);
            prop_assert!(extend_mask(&m, r.max(s)).is_subset_of(&composed));
        }

        #[test]
        fn select_is_idempotent(bits in proptest::collection::vec(any::<bool>(), 12), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImageTensor::<f64>::from_fn(3, 3, 4, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
            let m = BinaryMask::new(3, 4, bits).unwrap();
            let once = select(&img, &m).unwrap();
            prop_assert_eq!(select(&once, &m).unwrap(), once);
        }
    }
}
