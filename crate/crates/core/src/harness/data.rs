//! Procedural scenes and concept datasets.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{BACKGROUNDS, COLORS, SHAPES, TEXTURES};
use crate::rng;

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "red" => [0.9, 0.15, 0.15],
        "green" => [0.15, 0.8, 0.2],
        "blue" => [0.2, 0.35, 0.95],
        "yellow" => [0.95, 0.9, 0.2],
        "purple" => [0.6, 0.25, 0.8],
        "orange" => [1.0, 0.55, 0.1],
        "cyan" => [0.2, 0.85, 0.9],
        "white" => [0.95, 0.95, 0.95],
        _ => return None,
    })
}

pub fn background_rgb(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "black" => [0.05, 0.05, 0.05],
        "gray" => [0.45, 0.45, 0.45],
        "navy" => [0.05, 0.08, 0.35],
        "olive" => [0.4, 0.4, 0.1],
        "maroon" => [0.4, 0.05, 0.1],
        "teal" => [0.05, 0.35, 0.35],
        _ => return None,
    })
}

fn darker(c: [f64; 3]) -> [f64; 3] {
    c.map(|v| v * 0.45)
}

/// Whether normalized offset `(u, v)` from the shape centre lies inside.
fn inside(shape: &str, u: f64, v: f64) -> bool {
    match shape {
        "circle" => u * u + v * v <= 1.0,
        "square" => u.abs().max(v.abs()) <= 0.85,
        "triangle" => (-0.9..=0.8).contains(&v) && u.abs() <= (v + 0.9) / 1.7,
        "diamond" => u.abs() + v.abs() <= 1.0,
        "cross" => (u.abs() <= 0.33 && v.abs() <= 1.0) || (v.abs() <= 0.33 && u.abs() <= 1.0),
        "ring" => (0.3..=1.0).contains(&(u * u + v * v)),
        _ => false,
    }
}

/// Whether pixel `(y, x)` takes the secondary colour under `texture`.
fn secondary_at(texture: &str, y: usize, x: usize, period: usize) -> bool {
    let (a, b) = (y / period, x / period);
    match texture {
        "stripes" => a % 2 == 1,
        "checker" => (a + b) % 2 == 1,
        "dots" => a % 2 == 1 && b % 2 == 1,
        _ => false,
    }
}

/// One centred object on a flat background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: String,
    pub primary: [f64; 3],
    pub secondary: [f64; 3],
    pub texture: String,
    pub background: String,
    /// Centre and radius as fractions of the image side.
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Scene {
    pub fn render(&self, height: usize, width: usize) -> Result<Image> {
        let bg = background_rgb(&self.background)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown background `{}`", self.background)))?;
        if !SHAPES.contains(&self.shape.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown shape `{}`", self.shape)));
        }
        let mut img = Image::filled(height, width, bg);
        let period = (width / 8).max(1);
        let side = height.min(width) as f64;
        for y in 0..height {
            for x in 0..width {
                let u = ((x as f64 + 0.5) / width as f64 - self.cx) * width as f64 / (self.radius * side);
                let v = ((y as f64 + 0.5) / height as f64 - self.cy) * height as f64 / (self.radius * side);
                if inside(&self.shape, u, v) {
                    let c = if secondary_at(&self.texture, y, x, period) {
                        self.secondary
                    } else {
                        self.primary
                    };
                    img.set_pixel(y, x, c);
                }
            }
        }
        Ok(img)
    }
}

/// Diagonal hatching that darkens every `period`-th diagonal band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hatching {
    pub period: usize,
    /// Mirror the diagonal direction.
    pub anti: bool,
    /// Multiplier applied on the hatch lines.
    pub strength: f64,
}

impl Hatching {
    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for y in 0..img.height {
            for x in 0..img.width {
                let d = if self.anti { x + img.height - 1 - y } else { x + y };
                if d % self.period == 0 {
                    out.set_pixel(y, x, img.pixel(y, x).map(|v| v * self.strength));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Object,
    Style,
}

/// Identity of a learned concept: an object look or a global filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Signature {
    Object {
        shape: String,
        primary: String,
        secondary: String,
        texture: String,
    },
    Style(Hatching),
}

impl Signature {
    pub fn kind(&self) -> ConceptKind {
        match self {
            Signature::Object { .. } => ConceptKind::Object,
            Signature::Style(_) => ConceptKind::Style,
        }
    }

    /// Base word whose embedding seeds the concept token.
    pub fn class_word(&self) -> &str {
        match self {
            Signature::Object { shape, .. } => shape,
            Signature::Style(_) => "style",
        }
    }
}

/// Reference images and prompts for one concept. Image `i` pairs with
/// `prompts[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDataset {
    pub name: String,
    pub signature: Signature,
    pub images: Vec<Image>,
    pub prompts: Vec<String>,
    pub eval_prompts: Vec<String>,
}

impl ConceptDataset {
    pub fn token(&self) -> String {
        format!("<{}>", self.name)
    }

    pub fn kind(&self) -> ConceptKind {
        self.signature.kind()
    }
}

/// Object and style signatures to realize, in task order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSuite {
    pub signatures: Vec<Signature>,
    pub images_per_concept: usize,
    pub eval_prompts: usize,
}

impl ConceptSuite {
    /// `n_objects` object concepts and `n_styles` styles. The first and last
    /// object share shape and palette and differ only in texture.
    pub fn auto(n_objects: usize, n_styles: usize, seed: u64) -> Result<Self> {
        if n_objects < 2 {
            return Err(Error::Config("a suite needs at least two object concepts".into()));
        }
        let mut r = rng::stream(seed, "concepts");
        let mut shapes: Vec<&str> = SHAPES.to_vec();
        shapes.shuffle(&mut r);
        let mut signatures = Vec::new();
        for k in 0..n_objects - 1 {
            let mut palette: Vec<&str> = COLORS.to_vec();
            palette.shuffle(&mut r);
            let texture = TEXTURES[1 + r.random_range(0..TEXTURES.len() - 1)];
            signatures.push(Signature::Object {
                shape: shapes[k % shapes.len()].into(),
                primary: palette[0].into(),
                secondary: palette[1].into(),
                texture: texture.into(),
            });
        }
        let Signature::Object {
            shape,
            primary,
            secondary,
            texture,
        } = signatures[0].clone()
        else {
            unreachable!("objects come first")
        };
        let other = TEXTURES[1..]
            .iter()
            .find(|&&t| t != texture)
            .expect("three patterned textures");
        signatures.push(Signature::Object {
            shape,
            primary,
            secondary,
            texture: (*other).into(),
        });
        for k in 0..n_styles {
            signatures.push(Signature::Style(Hatching {
                period: 3 + k,
                anti: k % 2 == 1,
                strength: 0.2,
            }));
        }
        Ok(Self {
            signatures,
            images_per_concept: 4,
            eval_prompts: 5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=5).contains(&self.images_per_concept) {
            return Err(Error::Config(format!(
                "images_per_concept = {} outside 3..=5",
                self.images_per_concept
            )));
        }
        if self.eval_prompts == 0 {
            return Err(Error::Config("eval_prompts must be at least 1".into()));
        }
        if self.signatures.len() < 2 {
            return Err(Error::Config("a suite needs at least two concepts".into()));
        }
        for (i, a) in self.signatures.iter().enumerate() {
            if self.signatures[..i].contains(a) {
                return Err(Error::Config(format!("concept {i} duplicates an earlier signature")));
            }
            if let Signature::Object {
                shape,
                primary,
                secondary,
                texture,
            } = a
            {
                let ok = SHAPES.contains(&shape.as_str())
                    && color_rgb(primary).is_some()
                    && color_rgb(secondary).is_some()
                    && TEXTURES.contains(&texture.as_str());
                if !ok {
                    return Err(Error::Config(format!("concept {i} uses unknown words")));
                }
            }
        }
        Ok(())
    }
}

fn jittered(r: &mut impl Rng) -> (f64, f64, f64) {
    (
        0.5 + r.random_range(-0.08..0.08),
        0.5 + r.random_range(-0.08..0.08),
        r.random_range(0.3..0.38),
    )
}

fn random_base_scene(r: &mut impl Rng) -> (Scene, String) {
    let shape = SHAPES[r.random_range(0..SHAPES.len())];
    let color = COLORS[r.random_range(0..COLORS.len())];
    let texture = TEXTURES[r.random_range(0..TEXTURES.len())];
    let bg = BACKGROUNDS[r.random_range(0..BACKGROUNDS.len())];
    let (cx, cy, radius) = jittered(r);
    let primary = color_rgb(color).expect("palette word");
    let (secondary, caption) = if texture == "solid" {
        (darker(primary), format!("a {color} solid {shape} on {bg}"))
    } else {
        let others: Vec<&str> = COLORS.iter().copied().filter(|&c| c != color).collect();
        let second = others[r.random_range(0..others.len())];
        (
            color_rgb(second).expect("palette word"),
            format!("a {color} and {second} {texture} {shape} on {bg}"),
        )
    };
    let scene = Scene {
        shape: shape.into(),
        primary,
        secondary,
        texture: texture.into(),
        background: bg.into(),
        cx,
        cy,
        radius,
    };
    (scene, caption)
}

/// Realizes each signature as `images_per_concept` references plus
/// `eval_prompts` held-out prompts. Deterministic in `seed`.
pub fn generate_concepts(suite: &ConceptSuite, height: usize, width: usize, seed: u64) -> Result<Vec<ConceptDataset>> {
    suite.validate()?;
    let mut out = Vec::with_capacity(suite.signatures.len());
    for (k, sig) in suite.signatures.iter().enumerate() {
        let name = format!("v{}", k + 1);
        let token = format!("<{name}>");
        let mut r = rng::stream(seed, &format!("concept{}", k + 1));
        let mut images = Vec::new();
        let mut prompts = Vec::new();
        let bgs: Vec<&str> = {
            let mut b = BACKGROUNDS.to_vec();
            b.shuffle(&mut r);
            b
        };
        for i in 0..suite.images_per_concept {
            let bg = bgs[i % bgs.len()];
            let (img, prompt) = match sig {
                Signature::Object {
                    shape,
                    primary,
                    secondary,
                    texture,
                } => {
                    let (cx, cy, radius) = jittered(&mut r);
                    let scene = Scene {
                        shape: shape.clone(),
                        primary: color_rgb(primary).expect("validated"),
                        secondary: color_rgb(secondary).expect("validated"),
                        texture: texture.clone(),
                        background: bg.into(),
                        cx,
                        cy,
                        radius,
                    };
                    (scene.render(height, width)?, format!("a {token} on {bg}"))
                }
                Signature::Style(h) => {
                    let (mut scene, _) = random_base_scene(&mut r);
                    scene.background = bg.into();
                    let color = COLORS[r.random_range(0..COLORS.len())];
                    scene.primary = color_rgb(color).expect("palette word");
                    scene.secondary = darker(scene.primary);
                    scene.texture = "solid".into();
                    let img = h.apply(&scene.render(height, width)?);
                    (img, format!("a {color} {} on {bg} in {token} style", scene.shape))
                }
            };
            images.push(img);
            prompts.push(prompt);
        }
        let eval_prompts = (0..suite.eval_prompts)
            .map(|j| {
                let bg = bgs[(suite.images_per_concept + j) % bgs.len()];
                match sig {
                    Signature::Object { .. } => format!("a {token} on {bg}"),
                    Signature::Style(_) => {
                        let shape = SHAPES[j % SHAPES.len()];
                        let color = COLORS[(j * 3 + k) % COLORS.len()];
                        format!("a {color} {shape} on {bg} in {token} style")
                    }
                }
            })
            .collect();
        out.push(ConceptDataset {
            name,
            signature: sig.clone(),
            images,
            prompts,
            eval_prompts,
        });
    }
    Ok(out)
}

/// Pretraining corpus of base-vocabulary scenes with their captions.
/// Every `plain_every`-th sample is a bare background captioned
/// `a photo of <bg>`, giving composition a scene-level prompt.
pub fn base_corpus(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<(Image, String)>> {
    let mut r = rng::stream(seed, "corpus");
    let plain_every = 8;
    (0..n)
        .map(|i| {
            if i % plain_every == plain_every - 1 {
                let bg = BACKGROUNDS[r.random_range(0..BACKGROUNDS.len())];
                let img = Image::filled(height, width, background_rgb(bg).expect("palette word"));
                Ok((img, format!("a photo of {bg}")))
            } else {
                let (scene, caption) = random_base_scene(&mut r);
                Ok((scene.render(height, width)?, caption))
            }
        })
        .collect()
}

/// Ordered task list over a suite; `label` names the permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub order: Vec<usize>,
    pub label: String,
}

impl TaskSequence {
    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            label: "forward".into(),
        }
    }

    pub fn new(order: Vec<usize>, label: &str, concepts: &[ConceptDataset]) -> Result<Self> {
        let mut seen = vec![false; concepts.len()];
        for &k in &order {
            if k >= concepts.len() || std::mem::replace(&mut seen[k], true) {
                return Err(Error::Config(format!("task order {order:?} repeats or leaves the suite")));
            }
        }
        let seq = Self {
            order,
            label: label.into(),
        };
        if !seq.has_similar_pair(concepts) {
            return Err(Error::Config(format!(
                "task order {:?} has no pair sharing a shape class",
                seq.order
            )));
        }
        Ok(seq)
    }

    pub fn has_similar_pair(&self, concepts: &[ConceptDataset]) -> bool {
        let shapes: Vec<&str> = self
            .order
            .iter()
            .filter_map(|&k| match &concepts[k].signature {
                Signature::Object { shape, .. } => Some(shape.as_str()),
                Signature::Style(_) => None,
            })
            .collect();
        shapes.iter().enumerate().any(|(i, s)| shapes[..i].contains(s))
    }
}
