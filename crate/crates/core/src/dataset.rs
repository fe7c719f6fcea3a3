//! On-disk dataset layout.
//!
//! ```text
//! <dir>/scenes/<k>/meta.json
//! <dir>/scenes/<k>/instance_<i>.pgm     (synthetic scenes)
//! <dir>/scenes/<k>/image.png            (external scenes, bridge mode)
//! <dir>/gt/<q>.pgm
//! <dir>/queries.jsonl
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scene::{
    generate_category_queries, generate_sample, generate_scene, mix_seed, Instance, Query,
    QueryKind, Scene, SceneSpec,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub scene: usize,
    pub query: Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(scene, query)` pairs in sample order.
    pub fn pairs(&self) -> impl Iterator<Item = (&Scene, &Query)> {
        self.samples
            .iter()
            .map(|s| (&self.scenes[s.scene], &s.query))
    }

    /// Samples whose indices satisfy `keep`, with scenes re-indexed densely.
    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Dataset {
        let mut out = Dataset::default();
        let mut remap = BTreeMap::new();
        for s in self.samples.iter().filter(|s| keep(s)) {
            let idx = *remap.entry(s.scene).or_insert_with(|| {
                out.scenes.push(self.scenes[s.scene].clone());
                out.scenes.len() - 1
            });
            out.samples.push(Sample {
                scene: idx,
                query: s.query.clone(),
            });
        }
        out
    }
}

/// `n` scenes with one query each; scene `k` uses sub-seed `mix_seed(seed, k)`.
/// Output is independent of the rayon pool size.
pub fn generate_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let pairs = (0..n)
        .into_par_iter()
        .map(|k| generate_sample(spec, mix_seed(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::default();
    for (k, (scene, query)) in pairs.into_iter().enumerate() {
        ds.scenes.push(scene);
        ds.samples.push(Sample { scene: k, query });
    }
    Ok(ds)
}

/// `n` scenes with one query per category each (`C · n` samples, scene-major).
/// Scene `k` uses sub-seed `mix_seed(seed, k)` for layout and its queries
/// draw from a separate stream.
pub fn generate_category_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let per_scene = (0..n)
        .into_par_iter()
        .map(|k| {
            let sub = mix_seed(seed, k as u64);
            let scene = generate_scene(spec, mix_seed(sub, 0))?;
            let queries = generate_category_queries(&scene, mix_seed(sub, 3), Some(spec))?;
            Ok((scene, queries))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::default();
    for (k, (scene, queries)) in per_scene.into_iter().enumerate() {
        ds.scenes.push(scene);
        ds.samples
            .extend(queries.into_iter().map(|query| Sample { scene: k, query }));
    }
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct MetaInstance {
    id: usize,
    category: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    canvas: [usize; 2],
    #[serde(default)]
    instances: Vec<MetaInstance>,
    category_names: BTreeMap<usize, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct QueryLine {
    scene: usize,
    text: String,
    kind: QueryKind,
    target_category: Option<usize>,
    gt_mask: String,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::malformed(path, None, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let meta = Meta {
        canvas: [scene.width, scene.height],
        instances: scene
            .instances
            .iter()
            .map(|i| MetaInstance {
                id: i.id,
                category: i.category,
            })
            .collect(),
        category_names: scene.category_names.iter().cloned().enumerate().collect(),
        image: scene.image.as_ref().map(|_| "image.png".to_string()),
    };
    if let Some(src) = &scene.image {
        let dst = dir.join("image.png");
        if src != &dst {
            fs::copy(src, &dst).map_err(|e| Error::io(src, e))?;
        }
    }
    for inst in &scene.instances {
        inst.mask
            .save_pgm(&dir.join(format!("instance_{}.pgm", inst.id)))?;
    }
    write_json(&dir.join("meta.json"), &meta)
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    create_dir(&dir.join("scenes"))?;
    create_dir(&dir.join("gt"))?;
    ds.scenes
        .par_iter()
        .enumerate()
        .try_for_each(|(k, scene)| write_scene(scene, &dir.join("scenes").join(k.to_string())))?;
    ds.samples.par_iter().enumerate().try_for_each(|(q, s)| {
        s.query
            .gt_mask
            .save_pgm(&dir.join("gt").join(format!("{q}.pgm")))
    })?;
    let path = dir.join("queries.jsonl");
    let mut out = String::new();
    for (q, s) in ds.samples.iter().enumerate() {
        let line = QueryLine {
            scene: s.scene,
            text: s.query.text.clone(),
            kind: s.query.kind,
            target_category: s.query.target_category,
            gt_mask: format!("gt/{q}.pgm"),
        };
        out.push_str(&serde_json::to_string(&line).expect("query line serializes"));
        out.push('\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))
}

fn read_scene(dir: &Path) -> Result<Scene> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(&meta_path, None, e.to_string()))?;
    let [width, height] = meta.canvas;
    if width == 0 || height == 0 {
        return Err(Error::malformed(
            &meta_path,
            None,
            "canvas must be at least 1x1",
        ));
    }
    let ncat = meta.category_names.len();
    let category_names: Vec<String> = (0..ncat)
        .map(|c| {
            meta.category_names.get(&c).cloned().ok_or_else(|| {
                Error::malformed(
                    &meta_path,
                    None,
                    format!("category ids must be dense, missing {c}"),
                )
            })
        })
        .collect::<Result<_>>()?;
    let mut instances = Vec::with_capacity(meta.instances.len());
    for (i, mi) in meta.instances.iter().enumerate() {
        if mi.id != i {
            return Err(Error::malformed(
                &meta_path,
                None,
                format!("instance ids must be dense, found {} at {i}", mi.id),
            ));
        }
        if mi.category >= ncat {
            return Err(Error::malformed(
                &meta_path,
                None,
                format!("unknown category {}", mi.category),
            ));
        }
        let p = dir.join(format!("instance_{i}.pgm"));
        let mask = BinaryMask::load_pgm(&p)?;
        if mask.width() != width || mask.height() != height {
            return Err(Error::malformed(
                &p,
                None,
                format!("mask is not {width}x{height}"),
            ));
        }
        instances.push(Instance {
            id: i,
            category: mi.category,
            mask,
        });
    }
    let image = match meta.image {
        Some(name) => {
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::malformed(
                    &p,
                    None,
                    "referenced image does not exist",
                ));
            }
            Some(p)
        }
        None => None,
    };
    Ok(Scene {
        width,
        height,
        instances,
        category_names,
        image,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let scenes_dir = dir.join("scenes");
    let entries = fs::read_dir(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&scenes_dir, e))?;
        if let Some(k) = e.file_name().to_str().and_then(|n| n.parse::<usize>().ok()) {
            ids.push(k);
        }
    }
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(i, &k)| i != k) {
        return Err(Error::malformed(
            &scenes_dir,
            None,
            "scene directories must be numbered 0..n",
        ));
    }
    let scenes = ids
        .par_iter()
        .map(|k| read_scene(&scenes_dir.join(k.to_string())))
        .collect::<Result<Vec<_>>>()?;

    let qpath = dir.join("queries.jsonl");
    let f = fs::File::open(&qpath).map_err(|e| Error::io(&qpath, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&qpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryLine = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(&qpath, Some(i + 1), e.to_string()))?;
        if q.scene >= scenes.len() {
            return Err(Error::malformed(
                &qpath,
                Some(i + 1),
                format!("unknown scene index {}", q.scene),
            ));
        }
        lines.push((i + 1, q));
    }
    let samples = lines
        .into_par_iter()
        .map(|(lineno, q)| {
            let scene = &scenes[q.scene];
            if let Some(c) = q.target_category {
                if c >= scene.category_names.len() {
                    return Err(Error::malformed(
                        &qpath,
                        Some(lineno),
                        format!("unknown category {c}"),
                    ));
                }
            }
            let gt_path = dir.join(&q.gt_mask);
            let gt_mask = BinaryMask::load_pgm(&gt_path)?;
            if gt_mask.width() != scene.width || gt_mask.height() != scene.height {
                return Err(Error::malformed(
                    &qpath,
                    Some(lineno),
                    "gt mask size differs from scene canvas",
                ));
            }
            Ok(Sample {
                scene: q.scene,
                query: Query {
                    text: q.text,
                    target_category: q.target_category,
                    kind: q.kind,
                    gt_mask,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { scenes, samples })
}

/// Path of the gt mask for sample `q` inside a dataset directory.
pub fn gt_path(dir: &Path, q: usize) -> PathBuf {
    dir.join("gt").join(format!("{q}.pgm"))
}
