//! Study layout: which volumes are compared, on which plane and slice.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StudyError};
use crate::render::{is_blank, plane_extent, ImageLibrary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];
}

/// Plane and slice index shared by both images of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct View {
    pub plane: Plane,
    pub slice: usize,
}

/// A generated volume and the model that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticImage {
    pub model: String,
    pub volume: String,
}

/// Section 1 pair: the rater picks the real image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealPair {
    pub real: String,
    pub synthetic: SyntheticImage,
    pub view: View,
}

/// Section 2 pair: the rater picks the more realistic of two models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPair {
    pub a: SyntheticImage,
    pub b: SyntheticImage,
    pub view: View,
}

pub const DEFAULT_EXPIRY_MINUTES: u64 = 60;

fn default_expiry() -> u64 {
    DEFAULT_EXPIRY_MINUTES
}

fn default_likert_labels() -> [String; 5] {
    ["extremely subtle", "subtle", "moderate", "clear", "obvious"].map(String::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyDefinition {
    pub name: String,
    pub section1: Vec<RealPair>,
    pub section2: Vec<ModelPair>,
    /// Minutes from session creation after which the session expires.
    #[serde(default = "default_expiry")]
    pub expiry_minutes: u64,
    /// Labels of Likert levels 1 through 5.
    #[serde(default = "default_likert_labels")]
    pub likert_labels: [String; 5],
}

impl StudyDefinition {
    pub fn new(name: impl Into<String>, section1: Vec<RealPair>, section2: Vec<ModelPair>) -> Self {
        StudyDefinition {
            name: name.into(),
            section1,
            section2,
            expiry_minutes: DEFAULT_EXPIRY_MINUTES,
            likert_labels: default_likert_labels(),
        }
    }

    pub fn total_pairs(&self) -> usize {
        self.section1.len() + self.section2.len()
    }

    /// Checks section sizes, model names and that every referenced volume
    /// exists and contains the pair's slice.
    pub fn validate(&self, library: &ImageLibrary) -> Result<()> {
        let invalid = |m: String| Err(StudyError::Validation(m));
        if self.section1.is_empty() || self.section2.is_empty() {
            return invalid("both sections need at least one pair".into());
        }
        if self.expiry_minutes == 0 {
            return invalid("expiry_minutes must be positive".into());
        }
        let check = |volume: &str, view: View, what: &str| -> Result<()> {
            let vol = library
                .get(volume)
                .ok_or_else(|| StudyError::Validation(format!("{what}: unknown volume {volume:?}")))?;
            let extent = plane_extent(vol.shape, view.plane);
            if view.slice >= extent {
                return Err(StudyError::Validation(format!(
                    "{what}: slice {} outside {:?} extent {extent} of {volume:?}",
                    view.slice, view.plane
                )));
            }
            Ok(())
        };
        for (i, p) in self.section1.iter().enumerate() {
            let what = format!("section1[{i}]");
            if p.synthetic.model.is_empty() {
                return invalid(format!("{what}: empty model name"));
            }
            check(&p.real, p.view, &what)?;
            check(&p.synthetic.volume, p.view, &what)?;
        }
        for (i, p) in self.section2.iter().enumerate() {
            let what = format!("section2[{i}]");
            if p.a.model.is_empty() || p.b.model.is_empty() {
                return invalid(format!("{what}: empty model name"));
            }
            if p.a.model == p.b.model {
                return invalid(format!("{what}: both images come from model {:?}", p.a.model));
            }
            check(&p.a.volume, p.view, &what)?;
            check(&p.b.volume, p.view, &what)?;
        }
        Ok(())
    }
}

/// Uniformly draws a plane among those with at least one slice that is
/// non-blank in both volumes, then a uniform such slice.
pub fn sample_view<R: Rng + ?Sized>(library: &ImageLibrary, first: &str, second: &str, rng: &mut R) -> Result<View> {
    let get = |id: &str| {
        library
            .get(id)
            .ok_or_else(|| StudyError::Validation(format!("unknown volume {id:?}")))
    };
    let (a, b) = (get(first)?, get(second)?);
    let mut by_plane = Vec::new();
    for plane in Plane::ALL {
        let n = plane_extent(a.shape, plane).min(plane_extent(b.shape, plane));
        let mut ok = Vec::new();
        for slice in 0..n {
            let view = View { plane, slice };
            if !is_blank(a, view)? && !is_blank(b, view)? {
                ok.push(view);
            }
        }
        if !ok.is_empty() {
            by_plane.push(ok);
        }
    }
    let views = by_plane
        .choose(rng)
        .ok_or_else(|| StudyError::Validation(format!("{first:?} and {second:?} share no non-blank slice")))?;
    Ok(*views.choose(rng).expect("non-empty"))
}

/// Builds a definition with a sampled view per pair. `section1` lists
/// `(real volume, synthetic image)` and `section2` lists model pairs.
pub fn design_study(
    name: &str,
    library: &ImageLibrary,
    section1: &[(String, SyntheticImage)],
    section2: &[(SyntheticImage, SyntheticImage)],
    seed: u64,
) -> Result<StudyDefinition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s1 = Vec::with_capacity(section1.len());
    for (real, synthetic) in section1 {
        let view = sample_view(library, real, &synthetic.volume, &mut rng)?;
        s1.push(RealPair {
            real: real.clone(),
            synthetic: synthetic.clone(),
            view,
        });
    }
    let mut s2 = Vec::with_capacity(section2.len());
    for (a, b) in section2 {
        let view = sample_view(library, &a.volume, &b.volume, &mut rng)?;
        s2.push(ModelPair {
            a: a.clone(),
            b: b.clone(),
            view,
        });
    }
    let def = StudyDefinition::new(name, s1, s2);
    def.validate(library)?;
    Ok(def)
}
