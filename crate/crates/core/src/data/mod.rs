//! Synthetic composed-retrieval triplets with controllable noise.
//!
//! Each triplet pairs a rendered reference image and a symbolic modification
//! with a target image. Two kinds of noise are injectable: background clutter
//! inside every image, and correspondence noise where a triplet's target is
//! swapped for the target of another triplet with different attributes.

mod manifest;
mod render;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{load_dataset, write_dataset};
pub use render::{decode_attributes, render_image, BACKGROUND, PALETTE};

use crate::error::{IntentError, Result};
use crate::image::Image;

/// Attribute fields in token-offset order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Shape,
    Color,
    Size,
    Position,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::Shape, Field::Color, Field::Size, Field::Position];
}

/// Cardinality of each attribute field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeSpace {
    pub shapes: usize,
    pub colors: usize,
    pub sizes: usize,
    pub positions: usize,
}

impl Default for AttributeSpace {
    fn default() -> Self {
        AttributeSpace {
            shapes: 4,
            colors: 6,
            sizes: 3,
            positions: 4,
        }
    }
}

impl AttributeSpace {
    pub fn validate(&self) -> Result<()> {
        let limits = [
            ("shapes", self.shapes, render::MAX_SHAPES),
            ("colors", self.colors, PALETTE.len()),
            ("sizes", self.sizes, render::MAX_SIZES),
            ("positions", self.positions, render::MAX_POSITIONS),
        ];
        for (name, value, max) in limits {
            if value < 2 || value > max {
                return Err(IntentError::InvalidArgument(format!(
                    "{name} cardinality {value} outside [2, {max}]"
                )));
            }
        }
        Ok(())
    }

    pub fn cardinality(&self, field: Field) -> usize {
        match field {
            Field::Shape => self.shapes,
            Field::Color => self.colors,
            Field::Size => self.sizes,
            Field::Position => self.positions,
        }
    }

    fn offset(&self, field: Field) -> usize {
        Field::ALL
            .iter()
            .take_while(|f| **f != field)
            .map(|f| self.cardinality(*f))
            .sum()
    }

    /// Number of distinct modification tokens.
    pub fn vocab_size(&self) -> usize {
        Field::ALL.iter().map(|f| self.cardinality(*f)).sum()
    }

    pub fn encode(&self, field: Field, value: usize) -> u32 {
        (self.offset(field) + value) as u32
    }

    pub fn decode(&self, token: u32) -> Result<(Field, usize)> {
        let mut t = token as usize;
        for field in Field::ALL {
            let card = self.cardinality(field);
            if t < card {
                return Ok((field, t));
            }
            t -= card;
        }
        Err(IntentError::InvalidArgument(format!(
            "token {token} outside vocabulary of size {}",
            self.vocab_size()
        )))
    }

    pub fn check(&self, attrs: &AttributeVector) -> Result<()> {
        for field in Field::ALL {
            if attrs.get(field) >= self.cardinality(field) {
                return Err(IntentError::InvalidArgument(format!(
                    "{field:?} id {} out of range {}",
                    attrs.get(field),
                    self.cardinality(field)
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> AttributeVector {
        AttributeVector {
            shape: rng.gen_range(0..self.shapes),
            color: rng.gen_range(0..self.colors),
            size: rng.gen_range(0..self.sizes),
            position: rng.gen_range(0..self.positions),
        }
    }

    /// Every attribute vector, in lexicographic order.
    pub fn enumerate(&self) -> impl Iterator<Item = AttributeVector> + '_ {
        (0..self.shapes).flat_map(move |shape| {
            (0..self.colors).flat_map(move |color| {
                (0..self.sizes).flat_map(move |size| {
                    (0..self.positions).map(move |position| AttributeVector {
                        shape,
                        color,
                        size,
                        position,
                    })
                })
            })
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", from = "[usize; 4]")]
pub struct AttributeVector {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    pub position: usize,
}

impl From<AttributeVector> for [usize; 4] {
    fn from(a: AttributeVector) -> Self {
        [a.shape, a.color, a.size, a.position]
    }
}

impl From<[usize; 4]> for AttributeVector {
    fn from(v: [usize; 4]) -> Self {
        AttributeVector {
            shape: v[0],
            color: v[1],
            size: v[2],
            position: v[3],
        }
    }
}

impl AttributeVector {
    pub fn get(&self, field: Field) -> usize {
        match field {
            Field::Shape => self.shape,
            Field::Color => self.color,
            Field::Size => self.size,
            Field::Position => self.position,
        }
    }

    pub fn set(&mut self, field: Field, value: usize) {
        match field {
            Field::Shape => self.shape = value,
            Field::Color => self.color = value,
            Field::Size => self.size = value,
            Field::Position => self.position = value,
        }
    }

    pub fn hamming(&self, other: &AttributeVector) -> usize {
        Field::ALL
            .iter()
            .filter(|f| self.get(**f) != other.get(**f))
            .count()
    }
}

/// Symbolic modification: a token per `(field, new value)` edit.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModificationText {
    pub tokens: Vec<u32>,
}

pub const MAX_EDITS: usize = 3;

impl ModificationText {
    pub fn empty() -> Self {
        ModificationText::default()
    }

    /// Builds a text from edits; rejects duplicate fields and bad values.
    pub fn from_edits(space: &AttributeSpace, edits: &[(Field, usize)]) -> Result<Self> {
        let tokens = edits
            .iter()
            .map(|(f, v)| {
                if *v >= space.cardinality(*f) {
                    Err(IntentError::InvalidArgument(format!("{f:?} value {v} out of range")))
                } else {
                    Ok(space.encode(*f, *v))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let text = ModificationText { tokens };
        text.edits(space)?;
        Ok(text)
    }

    pub fn edits(&self, space: &AttributeSpace) -> Result<Vec<(Field, usize)>> {
        let edits = self
            .tokens
            .iter()
            .map(|t| space.decode(*t))
            .collect::<Result<Vec<_>>>()?;
        for (i, (f, _)) in edits.iter().enumerate() {
            if edits[..i].iter().any(|(g, _)| g == f) {
                return Err(IntentError::InvalidArgument(format!(
                    "modification edits {f:?} twice"
                )));
            }
        }
        Ok(edits)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Applies every edit of `modification` to `attrs`.
pub fn apply_modification(
    space: &AttributeSpace,
    attrs: &AttributeVector,
    modification: &ModificationText,
) -> Result<AttributeVector> {
    let mut out = *attrs;
    for (field, value) in modification.edits(space)? {
        out.set(field, value);
    }
    Ok(out)
}

/// 1 to 3 edits on distinct fields, each moving the field to a new value.
fn sample_modification(
    space: &AttributeSpace,
    attrs: &AttributeVector,
    rng: &mut impl Rng,
) -> ModificationText {
    let n_edits = rng.gen_range(1..=MAX_EDITS);
    let mut edits = Vec::with_capacity(n_edits);
    for idx in sample(rng, Field::ALL.len(), n_edits).into_iter() {
        let field = Field::ALL[idx];
        let card = space.cardinality(field);
        let mut value = rng.gen_range(0..card - 1);
        if value >= attrs.get(field) {
            value += 1;
        }
        edits.push((field, value));
    }
    ModificationText {
        tokens: edits.iter().map(|(f, v)| space.encode(*f, *v)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub id: usize,
    pub reference: Image,
    pub modification: ModificationText,
    pub target: Image,
    pub ref_attrs: AttributeVector,
    pub target_attrs: AttributeVector,
    /// Ground truth only; training never reads it.
    pub is_noisy: bool,
}

/// A clean held-out query whose true target is `gallery[truth]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: usize,
    pub reference: Image,
    pub modification: ModificationText,
    pub ref_attrs: AttributeVector,
    pub target_attrs: AttributeVector,
    pub truth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryItem {
    pub attrs: AttributeVector,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Training triplets; the noise ratio applies to these.
    pub n_triplets: usize,
    /// Clean validation queries; `None` means `round(n_triplets / 4)`,
    /// i.e. a fifth of everything generated.
    pub n_validation: Option<usize>,
    pub noise_ratio: f64,
    pub clutter_level: f64,
    pub image_size: usize,
    pub seed: u64,
    pub space: AttributeSpace,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_triplets: 500,
            n_validation: None,
            noise_ratio: 0.2,
            clutter_level: 0.3,
            image_size: 32,
            seed: 0,
            space: AttributeSpace::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validation_count(&self) -> usize {
        self.n_validation
            .unwrap_or_else(|| (self.n_triplets as f64 / 4.0).round() as usize)
    }

    pub fn noisy_count(&self) -> usize {
        (self.noise_ratio * self.n_triplets as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        if self.n_triplets == 0 {
            return Err(IntentError::InvalidArgument("n_triplets must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(IntentError::InvalidArgument(format!(
                "noise ratio {} outside [0, 1]",
                self.noise_ratio
            )));
        }
        if self.n_triplets < 2 && self.noise_ratio > 0.0 {
            return Err(IntentError::InvalidArgument(
                "noise injection needs at least 2 triplets to find a swap partner".into(),
            ));
        }
        if self.image_size < 16 {
            return Err(IntentError::InvalidArgument(format!(
                "image size {} is below the minimum of 16",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletDataset {
    pub config: DatasetConfig,
    pub triplets: Vec<Triplet>,
    pub validation: Vec<Query>,
    /// One entry per distinct validation target attribute vector.
    pub gallery: Vec<GalleryItem>,
}

impl TripletDataset {
    pub fn noisy_count(&self) -> usize {
        self.triplets.iter().filter(|t| t.is_noisy).count()
    }

    pub fn truths(&self) -> Vec<usize> {
        self.validation.iter().map(|q| q.truth).collect()
    }
}

struct Draft {
    ref_attrs: AttributeVector,
    modification: ModificationText,
    target_attrs: AttributeVector,
    ref_seed: u64,
    target_seed: u64,
}

fn draft(space: &AttributeSpace, rng: &mut ChaCha8Rng) -> Draft {
    let ref_attrs = space.sample(rng);
    let modification = sample_modification(space, &ref_attrs, rng);
    let target_attrs = apply_modification(space, &ref_attrs, &modification)
        .expect("sampled modifications are well formed");
    Draft {
        ref_attrs,
        modification,
        target_attrs,
        ref_seed: rng.gen(),
        target_seed: rng.gen(),
    }
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<TripletDataset> {
    config.validate()?;
    let space = &config.space;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let render = |attrs: &AttributeVector, seed: u64| {
        render_image(space, attrs, config.image_size, config.clutter_level, seed)
    };

    let drafts: Vec<Draft> = (0..config.n_triplets).map(|_| draft(space, &mut rng)).collect();
    let mut triplets = drafts
        .iter()
        .enumerate()
        .map(|(id, d)| {
            Ok(Triplet {
                id,
                reference: render(&d.ref_attrs, d.ref_seed)?,
                modification: d.modification.clone(),
                target: render(&d.target_attrs, d.target_seed)?,
                ref_attrs: d.ref_attrs,
                target_attrs: d.target_attrs,
                is_noisy: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // correspondence noise: swap in the clean target of a triplet that differs
    let clean_targets: Vec<(Image, AttributeVector)> = triplets
        .iter()
        .map(|t| (t.target.clone(), t.target_attrs))
        .collect();
    let mut corrupted: Vec<usize> = sample(&mut rng, config.n_triplets, config.noisy_count()).into_vec();
    corrupted.sort_unstable();
    for i in corrupted {
        let own = clean_targets[i].1;
        let partners: Vec<usize> = (0..config.n_triplets)
            .filter(|j| *j != i && clean_targets[*j].1 != own)
            .collect();
        if partners.is_empty() {
            return Err(IntentError::Degenerate(format!(
                "triplet {i} has no swap partner with different target attributes"
            )));
        }
        let j = partners[rng.gen_range(0..partners.len())];
        let t = &mut triplets[i];
        t.target = clean_targets[j].0.clone();
        t.target_attrs = clean_targets[j].1;
        t.is_noisy = true;
    }

    let mut validation = Vec::new();
    let mut gallery: Vec<GalleryItem> = Vec::new();
    for id in 0..config.validation_count() {
        let d = draft(space, &mut rng);
        let truth = match gallery.iter().position(|g| g.attrs == d.target_attrs) {
            Some(g) => g,
            None => {
                gallery.push(GalleryItem {
                    attrs: d.target_attrs,
                    image: render(&d.target_attrs, d.target_seed)?,
                });
                gallery.len() - 1
            }
        };
        validation.push(Query {
            id,
            reference: render(&d.ref_attrs, d.ref_seed)?,
            modification: d.modification,
            ref_attrs: d.ref_attrs,
            target_attrs: d.target_attrs,
            truth,
        });
    }

    Ok(TripletDataset {
        config: config.clone(),
        triplets,
        validation,
        gallery,
    })
}

/// For each validation query: its true gallery index followed by the
/// `subset_size - 1` gallery items nearest to it in attribute Hamming
/// distance, ties broken by ascending index.
pub fn subset_candidates(dataset: &TripletDataset, subset_size: usize) -> Result<Vec<Vec<usize>>> {
    let g = dataset.gallery.len();
    if subset_size < 2 || subset_size > g {
        return Err(IntentError::InvalidArgument(format!(
            "subset size {subset_size} outside [2, {g}]"
        )));
    }
    Ok(dataset
        .validation
        .iter()
        .map(|q| {
            let truth_attrs = dataset.gallery[q.truth].attrs;
            let mut others: Vec<(usize, usize)> = (0..g)
                .filter(|i| *i != q.truth)
                .map(|i| (dataset.gallery[i].attrs.hamming(&truth_attrs), i))
                .collect();
            others.sort_unstable();
            std::iter::once(q.truth)
                .chain(others.into_iter().take(subset_size - 1).map(|(_, i)| i))
                .collect()
        })
        .collect())
}
