//! Synthetic labeled scenes and language queries over them.
//!
//! Every random draw comes from a `ChaCha8Rng` seeded with the caller's
//! 64-bit seed (sub-seeds are derived with SplitMix64), so a scene is a pure
//! function of `(SceneSpec, seed)` on every platform.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

const CUE_TABLE: &str = include_str!("../data/cues_v1.json");

#[derive(Deserialize)]
struct CueTable {
    version: u32,
    cues: BTreeMap<String, String>,
}

fn cue_table() -> &'static CueTable {
    static TABLE: OnceLock<CueTable> = OnceLock::new();
    TABLE.get_or_init(|| serde_json::from_str(CUE_TABLE).expect("bundled cue table is valid JSON"))
}

/// Version of the bundled implicit-cue table.
pub fn cue_table_version() -> u32 {
    cue_table().version
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Filled disc; size is the radius.
    Disc,
    /// Axis-aligned rectangle; size bounds each side.
    Rectangle,
    /// Long thin bar, horizontal or vertical; size is the length.
    ElongatedStrip,
    /// Several overlapping discs; size is the disc radius.
    BlobCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub shape: ShapeFamily,
    pub min_size: usize,
    pub max_size: usize,
    /// Implicit phrasing; falls back to the bundled cue table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cue: Option<String>,
}

impl CategorySpec {
    fn new(name: &str, shape: ShapeFamily, min_size: usize, max_size: usize) -> Self {
        CategorySpec {
            name: name.to_string(),
            shape,
            min_size,
            max_size,
            cue: None,
        }
    }

    pub fn cue(&self) -> Option<&str> {
        self.cue
            .as_deref()
            .or_else(|| cue_table().cues.get(&self.name).map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub categories: Vec<CategorySpec>,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Minimum Chebyshev distance between pixels of different instances.
    pub min_separation: usize,
    /// Probability that one category is held out of a scene and queried.
    pub empty_target_prob: f64,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 256,
            height: 256,
            categories: vec![
                CategorySpec::new("tank", ShapeFamily::Disc, 6, 11),
                CategorySpec::new("greenhouse", ShapeFamily::Rectangle, 10, 22),
                CategorySpec::new("runway", ShapeFamily::ElongatedStrip, 50, 80),
                CategorySpec::new("water", ShapeFamily::BlobCluster, 6, 10),
                CategorySpec::new("helipad", ShapeFamily::Disc, 3, 5),
            ],
            min_instances: 2,
            max_instances: 6,
            min_separation: 4,
            empty_target_prob: 0.25,
            max_retries: 500,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!(
                "canvas {}x{} is too small",
                self.width, self.height
            ));
        }
        if self.categories.is_empty() {
            return bad("category library is empty".into());
        }
        if self.min_instances < 1 || self.min_instances > self.max_instances {
            return bad(format!(
                "instance count range [{}, {}] is empty",
                self.min_instances, self.max_instances
            ));
        }
        if self.min_separation < 2 {
            return bad(format!(
                "min_separation must be >= 2, got {}",
                self.min_separation
            ));
        }
        if !(0.0..=1.0).contains(&self.empty_target_prob) {
            return bad(format!(
                "empty_target_prob {} not in [0, 1]",
                self.empty_target_prob
            ));
        }
        for c in &self.categories {
            if c.min_size < 1 || c.min_size > c.max_size {
                return bad(format!("size range of '{}' is empty", c.name));
            }
            let fits = match c.shape {
                ShapeFamily::Disc => 2 * c.max_size + 1,
                ShapeFamily::BlobCluster => 4 * c.max_size + 1,
                ShapeFamily::Rectangle | ShapeFamily::ElongatedStrip => c.max_size,
            };
            if fits >= self.width.min(self.height) {
                return bad(format!("category '{}' does not fit the canvas", c.name));
            }
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: usize,
    pub category: usize,
    pub mask: BinaryMask,
}

/// A labeled world: disjoint instance masks, or an external image for bridge mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
    pub category_names: Vec<String>,
    pub image: Option<PathBuf>,
}

impl Scene {
    pub fn present_categories(&self) -> Vec<usize> {
        let mut cats: Vec<usize> = self.instances.iter().map(|i| i.category).collect();
        cats.sort_unstable();
        cats.dedup();
        cats
    }

    pub fn absent_categories(&self) -> Vec<usize> {
        let present = self.present_categories();
        (0..self.category_names.len())
            .filter(|c| !present.contains(c))
            .collect()
    }

    /// Semantic-level mask: union of every instance of `category`.
    pub fn category_mask(&self, category: usize) -> BinaryMask {
        let mut m = BinaryMask::new(self.width, self.height).expect("scene canvas is nonempty");
        for inst in self.instances.iter().filter(|i| i.category == category) {
            m.or_assign(&inst.mask)
                .expect("instance masks share the scene canvas");
        }
        m
    }

    pub fn empty_mask(&self) -> BinaryMask {
        BinaryMask::new(self.width, self.height).expect("scene canvas is nonempty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Explicit,
    Implicit,
    EmptyTarget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub text: String,
    pub target_category: Option<usize>,
    pub kind: QueryKind,
    pub gt_mask: BinaryMask,
}

fn shape_mask(spec: &SceneSpec, cat: &CategorySpec, rng: &mut ChaCha8Rng) -> BinaryMask {
    let (w, h) = (spec.width, spec.height);
    let mut m = BinaryMask::new(w, h).expect("validated canvas");
    let size = rng.gen_range(cat.min_size..=cat.max_size);
    let disc = |m: &mut BinaryMask, cx: i64, cy: i64, r: i64| {
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                    m.set(x as usize, y as usize, true);
                }
            }
        }
    };
    match cat.shape {
        ShapeFamily::Disc => {
            let r = size as i64;
            let cx = rng.gen_range(r..w as i64 - r);
            let cy = rng.gen_range(r..h as i64 - r);
            disc(&mut m, cx, cy, r);
        }
        ShapeFamily::Rectangle => {
            let rw = size;
            let rh = rng.gen_range(cat.min_size..=cat.max_size);
            let x0 = rng.gen_range(0..w - rw);
            let y0 = rng.gen_range(0..h - rh);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    m.set(x, y, true);
                }
            }
        }
        ShapeFamily::ElongatedStrip => {
            let thick = (size / 10).max(3);
            let (sw, sh) = if rng.gen_bool(0.5) {
                (size, thick)
            } else {
                (thick, size)
            };
            let x0 = rng.gen_range(0..w - sw);
            let y0 = rng.gen_range(0..h - sh);
            for y in y0..y0 + sh {
                for x in x0..x0 + sw {
                    m.set(x, y, true);
                }
            }
        }
        ShapeFamily::BlobCluster => {
            let r = size as i64;
            let margin = 2 * r;
            let mut cx = rng.gen_range(margin..w as i64 - margin);
            let mut cy = rng.gen_range(margin..h as i64 - margin);
            let (ox, oy) = (cx, cy);
            let lobes = rng.gen_range(3..=5);
            for _ in 0..lobes {
                let lr = rng.gen_range((r / 2).max(2)..=r);
                disc(&mut m, cx, cy, lr);
                // next lobe stays within the current one so the blob is connected
                cx = (cx + rng.gen_range(-lr..=lr)).clamp(ox - r, ox + r);
                cy = (cy + rng.gen_range(-lr..=lr)).clamp(oy - r, oy + r);
            }
        }
    }
    m
}

/// Square (Chebyshev) dilation by `radius`.
pub(crate) fn dilate(m: &BinaryMask, radius: usize) -> BinaryMask {
    let (w, h) = (m.width(), m.height());
    let src = m.to_bools();
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if src[y * w + x] {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                rows[y * w + lo..=y * w + hi]
                    .iter_mut()
                    .for_each(|b| *b = true);
            }
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if rows[y * w + x] {
                for yy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                    out[yy * w + x] = true;
                }
            }
        }
    }
    BinaryMask::from_bools(w, h, &out).expect("same canvas")
}

/// Generates a scene. Pure function of `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ncat = spec.categories.len();
    let allowed: Vec<usize> = if ncat >= 2 && rng.gen_bool(spec.empty_target_prob) {
        let held_out = rng.gen_range(0..ncat);
        (0..ncat).filter(|&c| c != held_out).collect()
    } else {
        (0..ncat).collect()
    };
    let n = rng.gen_range(spec.min_instances..=spec.max_instances);
    let mut occupied = BinaryMask::new(spec.width, spec.height)?;
    let mut instances = Vec::with_capacity(n);
    for id in 0..n {
        let category = allowed[rng.gen_range(0..allowed.len())];
        let cat = &spec.categories[category];
        let mut placed = None;
        for _ in 0..spec.max_retries {
            let m = shape_mask(spec, cat, &mut rng);
            if m.is_empty() {
                continue;
            }
            if !dilate(&m, spec.min_separation - 1).intersects(&occupied)? {
                placed = Some(m);
                break;
            }
        }
        let mask = placed.ok_or_else(|| Error::Placement {
            seed,
            msg: format!(
                "could not place instance {id} ('{}') after {} attempts",
                cat.name, spec.max_retries
            ),
        })?;
        occupied.or_assign(&mask)?;
        instances.push(Instance { id, category, mask });
    }
    Ok(Scene {
        width: spec.width,
        height: spec.height,
        instances,
        category_names: spec.category_names(),
        image: None,
    })
}

pub fn explicit_text(name: &str) -> String {
    format!("segment every {name}")
}

pub fn implicit_text(cue: &str) -> String {
    format!("highlight each {cue}")
}

/// Builds a query of the requested kind, with the category chosen by `seed`.
///
/// `spec` supplies implicit cues; pass `None` to use the bundled cue table.
pub fn generate_query(
    scene: &Scene,
    kind: QueryKind,
    seed: u64,
    spec: Option<&SceneSpec>,
) -> Result<Query> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = match kind {
        QueryKind::Explicit | QueryKind::Implicit => scene.present_categories(),
        QueryKind::EmptyTarget => scene.absent_categories(),
    };
    if pool.is_empty() {
        return Err(Error::Query(format!(
            "no category available for a {kind:?} query in this scene"
        )));
    }
    let category = pool[rng.gen_range(0..pool.len())];
    category_query(scene, category, kind, rng.gen(), spec)
}

/// Builds a query of the requested kind about one category.
pub fn category_query(
    scene: &Scene,
    category: usize,
    kind: QueryKind,
    seed: u64,
    spec: Option<&SceneSpec>,
) -> Result<Query> {
    let name = scene
        .category_names
        .get(category)
        .ok_or_else(|| Error::Query(format!("category {category} is not in the scene's table")))?;
    let present = scene.instances.iter().any(|i| i.category == category);
    if present == (kind == QueryKind::EmptyTarget) {
        return Err(Error::Query(format!(
            "a {kind:?} query cannot target category '{name}' in this scene"
        )));
    }
    let cue = || -> Result<String> {
        spec.and_then(|s| s.categories.get(category))
            .and_then(|c| c.cue().map(str::to_string))
            .or_else(|| cue_table().cues.get(name).cloned())
            .ok_or_else(|| Error::Query(format!("no implicit cue for category '{name}'")))
    };
    let text = match kind {
        QueryKind::Explicit => explicit_text(name),
        QueryKind::Implicit => implicit_text(&cue()?),
        QueryKind::EmptyTarget => {
            if ChaCha8Rng::seed_from_u64(seed).gen_bool(0.5) {
                explicit_text(name)
            } else {
                implicit_text(&cue()?)
            }
        }
    };
    let gt_mask = match kind {
        QueryKind::EmptyTarget => scene.empty_mask(),
        _ => scene.category_mask(category),
    };
    Ok(Query {
        text,
        target_category: Some(category),
        kind,
        gt_mask,
    })
}

/// One query per category of the scene: empty-target for absent categories,
/// explicit or implicit at even odds for present ones.
pub fn generate_category_queries(
    scene: &Scene,
    seed: u64,
    spec: Option<&SceneSpec>,
) -> Result<Vec<Query>> {
    (0..scene.category_names.len())
        .map(|c| {
            let sub = mix_seed(seed, c as u64);
            let kind = if scene.instances.iter().all(|i| i.category != c) {
                QueryKind::EmptyTarget
            } else if ChaCha8Rng::seed_from_u64(sub).gen_bool(0.5) {
                QueryKind::Explicit
            } else {
                QueryKind::Implicit
            };
            category_query(scene, c, kind, mix_seed(sub, 1), spec)
        })
        .collect()
}

/// One query per scene: empty-target with probability `spec.empty_target_prob`
/// when some category is absent, otherwise explicit or implicit at even odds.
pub fn generate_sample(spec: &SceneSpec, seed: u64) -> Result<(Scene, Query)> {
    let scene = generate_scene(spec, mix_seed(seed, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let kind = if !scene.absent_categories().is_empty() && rng.gen_bool(spec.empty_target_prob) {
        QueryKind::EmptyTarget
    } else if rng.gen_bool(0.5) {
        QueryKind::Explicit
    } else {
        QueryKind::Implicit
    };
    let query = generate_query(&scene, kind, mix_seed(seed, 2), Some(spec))?;
    Ok((scene, query))
}
