//! Promptable execution over scenes, plus mask decomposition and
//! mask-to-prompt derivation used by baselines and the scripted oracle.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{union, BBox, BinaryMask, PointPx};
use crate::protocol::{InstancePrompt, PromptSchema, PromptSet};
use crate::scene::Scene;

/// Version of the synthetic selection rule set; echoed into reports.
pub const SYNTHETIC_RULES_VERSION: u32 = 1;

/// Executes geometric prompts against a target and returns a binary mask.
///
/// Implementations must be deterministic and must not mutate the scene.
pub trait SegmenterBackend: Send + Sync {
    fn name(&self) -> String;

    fn execute(
        &self,
        scene: &Scene,
        prompt: &InstancePrompt,
        schema: &PromptSchema,
    ) -> Result<BinaryMask>;

    /// Union of the per-instance masks; the empty set yields all-background.
    fn execute_set(
        &self,
        scene: &Scene,
        prompts: &PromptSet,
        schema: &PromptSchema,
    ) -> Result<BinaryMask> {
        let masks = prompts
            .instances
            .iter()
            .map(|p| self.execute(scene, p, schema))
            .collect::<Result<Vec<_>>>()?;
        union(&masks, Some((scene.width, scene.height)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSegmenterParams {
    /// Minimum fraction of an instance inside the box for it to be a candidate.
    pub theta_in: f64,
    /// Carried for configuration compatibility; rule set v1 does not consult it.
    pub theta_strong: f64,
}

impl Default for SyntheticSegmenterParams {
    fn default() -> Self {
        SyntheticSegmenterParams {
            theta_in: 0.5,
            theta_strong: 0.9,
        }
    }
}

impl SyntheticSegmenterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_in > 0.0 && self.theta_in <= 1.0) {
            return Err(Error::Config(format!(
                "theta_in {} not in (0, 1]",
                self.theta_in
            )));
        }
        if !(0.0..=1.0).contains(&self.theta_strong) {
            return Err(Error::Config(format!(
                "theta_strong {} not in [0, 1]",
                self.theta_strong
            )));
        }
        Ok(())
    }
}

/// Whole-instance selection rules:
///
/// 1. candidates: instances with `|mask ∩ box| / |mask| ≥ theta_in`
///    (every instance when the schema has no box);
/// 2. drop candidates containing a negative point;
/// 3. if some candidates contain a positive point, return their union;
/// 4. else, with a box, return the candidate maximizing `(f, area, -id)`;
/// 5. else all-background.
pub fn execute_instance(
    scene: &Scene,
    prompt: &InstancePrompt,
    schema: &PromptSchema,
    params: &SyntheticSegmenterParams,
) -> BinaryMask {
    struct Cand<'a> {
        inside: usize,
        area: usize,
        id: usize,
        mask: &'a BinaryMask,
    }
    let use_box = schema.mode.has_box() && prompt.bbox.is_some();
    let mut cands: Vec<Cand> = scene
        .instances
        .iter()
        .filter_map(|inst| {
            let area = inst.mask.count();
            if area == 0 {
                return None;
            }
            let inside = match (&prompt.bbox, use_box) {
                (Some(b), true) => inst.mask.count_in_box(b),
                _ => area,
            };
            (inside as f64 / area as f64 >= params.theta_in).then_some(Cand {
                inside,
                area,
                id: inst.id,
                mask: &inst.mask,
            })
        })
        .collect();

    let hit = |m: &BinaryMask, p: &PointPx| p.in_canvas(m.width(), m.height()) && m.get(p.x, p.y);
    cands.retain(|c| !prompt.negatives().any(|p| hit(c.mask, p)));

    let hits: Vec<BinaryMask> = cands
        .iter()
        .filter(|c| prompt.positives().any(|p| hit(c.mask, p)))
        .map(|c| c.mask.clone())
        .collect();
    if !hits.is_empty() {
        return union(&hits, Some((scene.width, scene.height)))
            .expect("instances share the scene canvas");
    }
    if use_box {
        // exact comparison of inside/area fractions by cross-multiplication
        let best = cands.iter().max_by(|a, b| {
            (a.inside * b.area)
                .cmp(&(b.inside * a.area))
                .then(a.area.cmp(&b.area))
                .then(b.id.cmp(&a.id))
        });
        if let Some(c) = best {
            return c.mask.clone();
        }
    }
    scene.empty_mask()
}

/// Deterministic stand-in for a frozen promptable segmenter over synthetic scenes.
#[derive(Debug, Clone, Default)]
pub struct SyntheticSegmenter {
    pub params: SyntheticSegmenterParams,
}

impl SyntheticSegmenter {
    pub fn new(params: SyntheticSegmenterParams) -> Result<Self> {
        params.validate()?;
        Ok(SyntheticSegmenter { params })
    }
}

impl SegmenterBackend for SyntheticSegmenter {
    fn name(&self) -> String {
        format!("synthetic-v{SYNTHETIC_RULES_VERSION}")
    }

    fn execute(
        &self,
        scene: &Scene,
        prompt: &InstancePrompt,
        schema: &PromptSchema,
    ) -> Result<BinaryMask> {
        Ok(execute_instance(scene, prompt, schema, &self.params))
    }
}

/// Fills each box; without a box, marks each positive point. Mirrors the
/// bridge stub so the two paths can be compared.
#[derive(Debug, Clone, Copy, Default)]
pub struct FillSegmenter;

impl SegmenterBackend for FillSegmenter {
    fn name(&self) -> String {
        "fill".into()
    }

    fn execute(
        &self,
        scene: &Scene,
        prompt: &InstancePrompt,
        _schema: &PromptSchema,
    ) -> Result<BinaryMask> {
        match &prompt.bbox {
            Some(b) => BinaryMask::from_bbox(scene.width, scene.height, b),
            None => BinaryMask::from_pixels(
                scene.width,
                scene.height,
                prompt.positives().map(|p| (p.x, p.y)),
            ),
        }
    }
}

/// Density-based clustering of foreground pixels with a Chebyshev
/// neighborhood of radius `eps`. A pixel is a core point when its
/// neighborhood (itself included) holds at least `min_pts` foreground pixels.
/// Non-core pixels not reachable from a core point are dropped as noise.
/// Clusters are ordered by descending area, then by first pixel in row-major order.
pub fn decompose_mask(m: &BinaryMask, eps: usize, min_pts: usize) -> Result<Vec<BinaryMask>> {
    if eps < 1 || min_pts < 1 {
        return Err(Error::Config(format!(
            "eps and min_pts must be >= 1, got {eps} and {min_pts}"
        )));
    }
    let (w, h) = (m.width(), m.height());
    let fg = m.to_bools();
    // summed-area table for window counts
    let mut sat = vec![0usize; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                usize::from(fg[y * w + x]) + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x]
                    - sat[y * (w + 1) + x];
        }
    }
    let window = |x: usize, y: usize| {
        let (x0, y0) = (x.saturating_sub(eps), y.saturating_sub(eps));
        let (x1, y1) = ((x + eps).min(w - 1) + 1, (y + eps).min(h - 1) + 1);
        (x0, y0, x1, y1)
    };
    let core: Vec<bool> = (0..w * h)
        .map(|i| {
            if !fg[i] {
                return false;
            }
            let (x0, y0, x1, y1) = window(i % w, i / w);
            let n = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                - sat[y0 * (w + 1) + x1]
                - sat[y1 * (w + 1) + x0];
            n >= min_pts
        })
        .collect();

    const UNSET: usize = usize::MAX;
    let mut label = vec![UNSET; w * h];
    let mut clusters: Vec<(usize, Vec<usize>)> = Vec::new();
    for seed in 0..w * h {
        if !core[seed] || label[seed] != UNSET {
            continue;
        }
        let id = clusters.len();
        let mut members = vec![seed];
        label[seed] = id;
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            let (x0, y0, x1, y1) = window(p % w, p / w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let q = y * w + x;
                    if fg[q] && label[q] == UNSET {
                        label[q] = id;
                        members.push(q);
                        if core[q] {
                            queue.push_back(q);
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push((members[0], members));
    }
    clusters.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    clusters
        .into_iter()
        .map(|(_, px)| BinaryMask::from_pixels(w, h, px.into_iter().map(|i| (i % w, i / w))))
        .collect()
}

/// Chessboard distance from each pixel to the nearest background pixel, with
/// everything outside the canvas counted as background. Zero on background.
pub fn chebyshev_distance_transform(m: &BinaryMask) -> Vec<usize> {
    let (w, h) = (m.width(), m.height());
    let (pw, ph) = (w + 2, h + 2);
    let inf = usize::MAX / 2;
    let mut d = vec![0usize; pw * ph];
    for (x, y) in m.iter_ones() {
        d[(y + 1) * pw + x + 1] = inf;
    }
    for y in 1..=h {
        for x in 1..=w {
            let i = y * pw + x;
            if d[i] != 0 {
                let best = d[i - 1]
                    .min(d[i - pw - 1])
                    .min(d[i - pw])
                    .min(d[i - pw + 1]);
                d[i] = d[i].min(best + 1);
            }
        }
    }
    for y in (1..=h).rev() {
        for x in (1..=w).rev() {
            let i = y * pw + x;
            if d[i] != 0 {
                let best = d[i + 1]
                    .min(d[i + pw + 1])
                    .min(d[i + pw])
                    .min(d[i + pw - 1]);
                d[i] = d[i].min(best + 1);
            }
        }
    }
    let mut out = vec![0usize; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = d[(y + 1) * pw + x + 1];
        }
    }
    out
}

/// Tight box plus two interior points: the distance-transform peak and the
/// foreground pixel nearest the centroid (distinct from the peak when the
/// instance has at least two pixels). Ties go to the first pixel in row-major order.
pub fn derive_box_points(instance: &BinaryMask) -> Result<(BBox, [PointPx; 2])> {
    let bbox = instance
        .bbox()
        .ok_or_else(|| Error::InvalidMask("cannot derive prompts from an empty mask".into()))?;
    let w = instance.width();
    let dt = chebyshev_distance_transform(instance);
    let pixels: Vec<(usize, usize)> = instance.iter_ones().collect();
    let mut peak = pixels[0];
    for &(x, y) in &pixels {
        if dt[y * w + x] > dt[peak.1 * w + peak.0] {
            peak = (x, y);
        }
    }
    let n = pixels.len() as i128;
    let sx: i128 = pixels.iter().map(|p| p.0 as i128).sum();
    let sy: i128 = pixels.iter().map(|p| p.1 as i128).sum();
    // squared distance to the centroid, scaled by n^2 to stay in integers
    let dist = |&(x, y): &(usize, usize)| (n * x as i128 - sx).pow(2) + (n * y as i128 - sy).pow(2);
    let mut near: Option<(usize, usize)> = None;
    for p in &pixels {
        if pixels.len() >= 2 && *p == peak {
            continue;
        }
        if near.is_none_or(|q| dist(p) < dist(&q)) {
            near = Some(*p);
        }
    }
    let near = near.expect("at least one pixel");
    Ok((
        bbox,
        [
            PointPx::positive(peak.0, peak.1),
            PointPx::positive(near.0, near.1),
        ],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::PromptMode;
    use crate::scene::Instance;
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, x1: usize, y1: usize, x2: usize, y2: usize) -> BinaryMask {
        BinaryMask::from_bbox(w, h, &BBox::new(x1, y1, x2, y2)).unwrap()
    }

    fn scene(masks: Vec<BinaryMask>) -> Scene {
        let (w, h) = (masks[0].width(), masks[0].height());
        Scene {
            width: w,
            height: h,
            instances: masks
                .into_iter()
                .enumerate()
                .map(|(id, mask)| Instance {
                    id,
                    category: 0,
                    mask,
                })
                .collect(),
            category_names: vec!["tank".into()],
            image: None,
        }
    }

    fn schema(mode: PromptMode) -> PromptSchema {
        PromptSchema::new(mode, 64, 64)
    }

    fn run(s: &Scene, p: &InstancePrompt, mode: PromptMode) -> BinaryMask {
        execute_instance(s, p, &schema(mode), &SyntheticSegmenterParams::default())
    }

    #[test]
    fn box_and_point_select_instance() {
        let a = rect(64, 64, 10, 10, 19, 19);
        let b = rect(64, 64, 40, 40, 49, 49);
        let s = scene(vec![a.clone(), b]);
        let p = InstancePrompt::new(Some(BBox::new(9, 9, 20, 20)), &[(15, 15), (12, 12)], &[]);
        assert_eq!(run(&s, &p, PromptMode::BboxPos2), a);
    }

    #[test]
    fn points_filter_within_box() {
        let a = rect(64, 64, 10, 10, 19, 19);
        let b = rect(64, 64, 25, 10, 34, 19);
        let s = scene(vec![a.clone(), b]);
        let p = InstancePrompt::new(Some(BBox::new(5, 5, 40, 25)), &[(15, 15), (11, 11)], &[]);
        assert_eq!(run(&s, &p, PromptMode::BboxPos2), a);
    }

    #[test]
    fn fallback_picks_best_covered_candidate() {
        // A fully inside the box, B 60% inside; both points on background.
        let a = rect(64, 64, 10, 10, 13, 13);
        let b = rect(64, 64, 20, 10, 29, 19);
        let bx = BBox::new(8, 8, 25, 21);
        let f_a = a.count_in_box(&bx) as f64 / a.count() as f64;
        let f_b = b.count_in_box(&bx) as f64 / b.count() as f64;
        assert_eq!(f_a, 1.0);
        assert!((0.5..1.0).contains(&f_b));
        let s = scene(vec![a.clone(), b.clone()]);
        let p = InstancePrompt::new(Some(bx), &[(16, 16), (17, 17)], &[]);
        assert_eq!(run(&s, &p, PromptMode::BboxPos2), a);

        // equal coverage: larger area wins, then lower id
        let c = rect(64, 64, 40, 40, 41, 41);
        let d = rect(64, 64, 50, 40, 52, 42);
        let s = scene(vec![c.clone(), d.clone()]);
        let p = InstancePrompt::new(Some(BBox::new(38, 38, 55, 45)), &[(45, 45), (46, 45)], &[]);
        assert_eq!(run(&s, &p, PromptMode::BboxPos2), d);
        let e = rect(64, 64, 50, 40, 51, 41);
        let s = scene(vec![c.clone(), e]);
        assert_eq!(run(&s, &p, PromptMode::BboxPos2), c);
    }

    #[test]
    fn bbox_only_returns_single_candidate() {
        let a = rect(64, 64, 10, 10, 19, 19);
        let b = rect(64, 64, 25, 10, 30, 15);
        let s = scene(vec![a.clone(), b]);
        let p = InstancePrompt::new(Some(BBox::new(5, 5, 40, 25)), &[], &[]);
        assert_eq!(run(&s, &p, PromptMode::BboxOnly), a);
    }

    #[test]
    fn points_only_and_empty_cases() {
        let a = rect(64, 64, 10, 10, 19, 19);
        let s = scene(vec![a.clone()]);
        let p = InstancePrompt::new(None, &[(15, 15), (60, 60)], &[]);
        assert_eq!(run(&s, &p, PromptMode::PosPoints2), a);
        let miss = InstancePrompt::new(None, &[(50, 50), (60, 60)], &[]);
        assert!(run(&s, &miss, PromptMode::PosPoints2).is_empty());
        let far = InstancePrompt::new(Some(BBox::new(40, 40, 50, 50)), &[(45, 45), (46, 46)], &[]);
        assert!(run(&s, &far, PromptMode::BboxPos2).is_empty());
    }

    #[test]
    fn negative_point_vetoes() {
        let a = rect(64, 64, 10, 10, 19, 19);
        let s = scene(vec![a.clone()]);
        let keep = InstancePrompt::new(
            Some(BBox::new(9, 9, 20, 20)),
            &[(15, 15), (12, 12)],
            &[(0, 0), (30, 30)],
        );
        assert_eq!(run(&s, &keep, PromptMode::BboxPos2Neg2), a);
        let veto = InstancePrompt::new(
            Some(BBox::new(9, 9, 20, 20)),
            &[(15, 15), (12, 12)],
            &[(11, 11), (30, 30)],
        );
        assert!(run(&s, &veto, PromptMode::BboxPos2Neg2).is_empty());
    }

    #[test]
    fn prompt_set_union_and_idempotence() {
        let a = rect(64, 64, 10, 10, 19, 19);
        let b = rect(64, 64, 40, 40, 49, 49);
        let s = scene(vec![a.clone(), b.clone()]);
        let seg = SyntheticSegmenter::default();
        let sch = schema(PromptMode::BboxPos2);
        assert!(seg
            .execute_set(&s, &PromptSet::empty(), &sch)
            .unwrap()
            .is_empty());
        let pa = InstancePrompt::new(Some(BBox::new(9, 9, 20, 20)), &[(15, 15), (12, 12)], &[]);
        let pb = InstancePrompt::new(Some(BBox::new(39, 39, 50, 50)), &[(45, 45), (42, 42)], &[]);
        let both = seg
            .execute_set(&s, &PromptSet::new(vec![pa.clone(), pb]), &sch)
            .unwrap();
        assert_eq!(both, union(&[a.clone(), b], None).unwrap());
        let dup = seg
            .execute_set(&s, &PromptSet::new(vec![pa.clone(), pa.clone()]), &sch)
            .unwrap();
        assert_eq!(
            dup,
            seg.execute_set(&s, &PromptSet::new(vec![pa]), &sch)
                .unwrap()
        );
    }

    #[test]
    fn fill_segmenter_semantics() {
        let s = scene(vec![rect(4, 4, 0, 0, 0, 0)]);
        let sch = PromptSchema::new(PromptMode::BboxPos2, 4, 4);
        let p = InstancePrompt::new(Some(BBox::new(0, 0, 1, 1)), &[(3, 3), (3, 3)], &[]);
        assert_eq!(FillSegmenter.execute(&s, &p, &sch).unwrap().count(), 4);
        let q = InstancePrompt::new(None, &[(3, 3), (2, 0)], &[]);
        assert_eq!(FillSegmenter.execute(&s, &q, &sch).unwrap().count(), 2);
    }

    /// Connected components under Chebyshev distance <= eps, by brute force.
    fn eps_components(m: &BinaryMask, eps: usize) -> Vec<Vec<(usize, usize)>> {
        let px: Vec<(usize, usize)> = m.iter_ones().collect();
        let mut parent: Vec<usize> = (0..px.len()).collect();
        fn find(p: &mut [usize], i: usize) -> usize {
            if p[i] != i {
                let r = find(p, p[i]);
                p[i] = r;
            }
            p[i]
        }
        for i in 0..px.len() {
            for j in i + 1..px.len() {
                if px[i].0.abs_diff(px[j].0).max(px[i].1.abs_diff(px[j].1)) <= eps {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
        for (i, &p) in px.iter().enumerate() {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(p);
        }
        groups.into_values().collect()
    }

    #[test]
    fn decompose_two_blobs() {
        let mut m = rect(32, 16, 2, 2, 4, 4);
        m.or_assign(&rect(32, 16, 15, 2, 17, 4)).unwrap();
        let parts = decompose_mask(&m, 2, 4).unwrap();
        let oracle = eps_components(&m, 2);
        assert_eq!(parts.len(), 2);
        assert_eq!(oracle.len(), 2);
        for comp in oracle {
            let cm = BinaryMask::from_pixels(32, 16, comp).unwrap();
            assert!(parts.contains(&cm));
        }
        assert_eq!(parts[0], rect(32, 16, 2, 2, 4, 4));
    }

    #[test]
    fn decompose_trivial_cases() {
        let blob = rect(16, 16, 3, 3, 9, 8);
        assert_eq!(decompose_mask(&blob, 3, 5).unwrap(), vec![blob]);
        assert!(decompose_mask(&BinaryMask::new(8, 8).unwrap(), 3, 5)
            .unwrap()
            .is_empty());
        assert!(decompose_mask(&BinaryMask::new(8, 8).unwrap(), 0, 5).is_err());
        // an isolated pixel is noise
        let mut m = rect(16, 16, 0, 0, 3, 3);
        m.set(12, 12, true);
        let parts = decompose_mask(&m, 1, 4).unwrap();
        assert_eq!(parts, vec![rect(16, 16, 0, 0, 3, 3)]);
    }

    #[test]
    fn box_points_examples() {
        let m = rect(16, 16, 2, 3, 5, 7);
        let (b, pts) = derive_box_points(&m).unwrap();
        assert_eq!(b, BBox::new(2, 3, 5, 7));
        assert!(pts.iter().all(|p| m.get(p.x, p.y)));
        assert_ne!((pts[0].x, pts[0].y), (pts[1].x, pts[1].y));

        let single = BinaryMask::from_pixels(8, 8, [(4, 5)]).unwrap();
        let (b, pts) = derive_box_points(&single).unwrap();
        assert_eq!(b, BBox::new(4, 5, 4, 5));
        assert_eq!((pts[0].x, pts[0].y), (4, 5));
        assert_eq!((pts[1].x, pts[1].y), (4, 5));
        assert!(derive_box_points(&BinaryMask::new(4, 4).unwrap()).is_err());
    }

    fn brute_dt(m: &BinaryMask) -> Vec<usize> {
        let (w, h) = (m.width() as i64, m.height() as i64);
        let mut out = vec![0; (w * h) as usize];
        for (x, y) in m.iter_ones() {
            let (x, y) = (x as i64, y as i64);
            let mut best = (x + 1).min(y + 1).min(w - x).min(h - y);
            for by in 0..h {
                for bx in 0..w {
                    if !m.get(bx as usize, by as usize) {
                        best = best.min((bx - x).abs().max((by - y).abs()));
                    }
                }
            }
            out[(y * w + x) as usize] = best as usize;
        }
        out
    }

    #[test]
    fn l_shape_peak_in_thick_arm() {
        let mut m = rect(40, 40, 5, 5, 16, 16);
        m.or_assign(&rect(40, 40, 17, 13, 35, 15)).unwrap();
        let dt = chebyshev_distance_transform(&m);
        assert_eq!(dt, brute_dt(&m));
        let (_, pts) = derive_box_points(&m).unwrap();
        assert!(
            pts[0].x <= 16,
            "peak {:?} should be in the thick arm",
            pts[0]
        );
        let max = *dt.iter().max().unwrap();
        assert_eq!(dt[pts[0].y * 40 + pts[0].x], max);
    }

    fn arb_mask(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(prop::bool::weighted(0.35), w * h)
            .prop_map(move |b| BinaryMask::from_bools(w, h, &b).unwrap())
    }

    proptest! {
        #[test]
        fn dt_matches_brute_force(m in arb_mask(12, 9)) {
            prop_assert_eq!(chebyshev_distance_transform(&m), brute_dt(&m));
        }

        #[test]
        fn decompose_invariants(m in arb_mask(20, 14), eps in 1usize..3, min_pts in 1usize..6) {
            let parts = decompose_mask(&m, eps, min_pts).unwrap();
            for (i, a) in parts.iter().enumerate() {
                prop_assert!(a.is_subset_of(&m).unwrap());
                prop_assert_eq!(eps_components(a, eps).len(), 1);
                for b in &parts[i + 1..] {
                    prop_assert!(!a.intersects(b).unwrap());
                    prop_assert!(a.count() >= b.count());
                }
            }
            if min_pts == 1 {
                prop_assert_eq!(parts.len(), eps_components(&m, eps).len());
            }
        }

        #[test]
        fn selection_is_whole_instances(
            bx in (0usize..60, 0usize..60, 1usize..30, 1usize..30),
            pts in proptest::collection::vec((0usize..64, 0usize..64), 2),
            neg in proptest::collection::vec((0usize..64, 0usize..64), 2),
        ) {
            let s = scene(vec![
                rect(64, 64, 5, 5, 14, 14),
                rect(64, 64, 20, 5, 40, 9),
                rect(64, 64, 30, 30, 50, 55),
            ]);
            let b = BBox::new(bx.0, bx.1, (bx.0 + bx.2).min(63), (bx.1 + bx.3).min(63));
            for mode in PromptMode::ALL {
                let p = InstancePrompt::new(
                    mode.has_box().then_some(b),
                    &pts[..mode.positive_points().min(2)],
                    &neg[..mode.negative_points()],
                );
                let out = run(&s, &p, mode);
                let mut covered = BinaryMask::new(64, 64).unwrap();
                for inst in &s.instances {
                    let inter = out.intersection_count(&inst.mask).unwrap();
                    prop_assert!(inter == 0 || inter == inst.mask.count());
                    if inter > 0 {
                        covered.or_assign(&inst.mask).unwrap();
                    }
                }
                prop_assert_eq!(covered, out);
            }
        }

        #[test]
        fn negative_point_inside_selection_removes_it(
            bx in (0usize..30, 0usize..30, 10usize..40, 10usize..40),
            pts in proptest::collection::vec((0usize..64, 0usize..64), 2),
        ) {
            let s = scene(vec![rect(64, 64, 5, 5, 14, 14), rect(64, 64, 30, 30, 50, 55)]);
            let b = BBox::new(bx.0, bx.1, (bx.0 + bx.2).min(63), (bx.1 + bx.3).min(63));
            let base = InstancePrompt::new(Some(b), &pts, &[(63, 0), (0, 63)]);
            let out = run(&s, &base, PromptMode::BboxPos2Neg2);
            for inst in &s.instances {
                if inst.mask.is_subset_of(&out).unwrap() && !inst.mask.is_empty() && out.intersects(&inst.mask).unwrap() {
                    let (vx, vy) = inst.mask.iter_ones().next().unwrap();
                    let vetoed = InstancePrompt::new(Some(b), &pts, &[(vx, vy), (0, 63)]);
                    let after = run(&s, &vetoed, PromptMode::BboxPos2Neg2);
                    prop_assert!(!after.intersects(&inst.mask).unwrap());
                }
            }
        }

        #[test]
        fn derived_prompts_recover_convex_instance(x1 in 0usize..40, y1 in 0usize..40, w in 1usize..20, h in 1usize..20, r in 1usize..8) {
            let target = rect(64, 64, x1, y1, x1 + w, y1 + h);
            let mut disc = BinaryMask::new(64, 64).unwrap();
            let (cx, cy) = (55i64, 55i64);
            for y in 0..64i64 { for x in 0..64i64 {
                if (x - cx).pow(2) + (y - cy).pow(2) <= (r * r) as i64 { disc.set(x as usize, y as usize, true); }
            }}
            prop_assume!(!disc.intersects(&target).unwrap());
            let s = scene(vec![target.clone(), disc.clone()]);
            for m in [&target, &disc] {
                let (b, pts) = derive_box_points(m).unwrap();
                let p = InstancePrompt::new(Some(b), &[(pts[0].x, pts[0].y), (pts[1].x, pts[1].y)], &[]);
                prop_assert_eq!(crate::mask::iou(&run(&s, &p, PromptMode::BboxPos2), m).unwrap(), 1.0);
            }
        }
    }
}
