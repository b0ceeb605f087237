//! Pyramid-level assignment and per-location positive/negative labeling.
//!
//! Each ground-truth box is mapped to exactly one pyramid level by its scale.
//! On that level, every feature location whose image-space center falls inside
//! the shrunken "positive area" of the box is labeled positive for that
//! instance; overlap conflicts go to the instance whose box center is closest,
//! with exact distance ties broken by the smaller instance id. Everything else
//! on every level is negative; there is no ignore region.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};

/// Geometry of one feature-map level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Semantic level index (stride = 2^level when built via [`PyramidSpec::for_image`]).
    pub level: usize,
    /// Image pixels per feature cell.
    pub stride: f64,
    /// Cells along the x axis.
    pub width: usize,
    /// Cells along the y axis.
    pub height: usize,
}

impl GridSpec {
    /// Image-space center of the feature at row `i`, column `j`.
    #[inline]
    pub fn center(&self, i: usize, j: usize) -> Point {
        Point::new((j as f64 + 0.5) * self.stride, (i as f64 + 0.5) * self.stride)
    }
}

/// Ordered multi-level feature geometry plus the scale reference used for
/// level assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub levels: Vec<GridSpec>,
    /// Reference object size (pixels) that maps to the first level.
    pub base_scale: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl PyramidSpec {
    pub fn new(levels: Vec<GridSpec>, base_scale: f64, image_width: f64, image_height: f64) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidParameter("pyramid needs at least one level".into()));
        }
        if base_scale <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "base_scale must be positive, got {base_scale}"
            )));
        }
        for pair in levels.windows(2) {
            if pair[1].stride != 2.0 * pair[0].stride || pair[1].level != pair[0].level + 1 {
                return Err(Error::InvalidParameter(format!(
                    "strides must double per level: level {} stride {} followed by level {} stride {}",
                    pair[0].level, pair[0].stride, pair[1].level, pair[1].stride
                )));
            }
        }
        for g in &levels {
            if g.stride <= 0.0 || g.width == 0 || g.height == 0 {
                return Err(Error::InvalidParameter(format!(
                    "level {} has degenerate geometry ({}x{}, stride {})",
                    g.level, g.width, g.height, g.stride
                )));
            }
        }
        Ok(Self {
            levels,
            base_scale,
            image_width,
            image_height,
        })
    }

    /// Builds the pyramid for an image, with strides `2^min_level ..= 2^max_level`
    /// and grid sizes covering the image.
    pub fn for_image(
        image_width: usize,
        image_height: usize,
        min_level: usize,
        max_level: usize,
        base_scale: f64,
    ) -> Result<Self> {
        if min_level > max_level {
            return Err(Error::InvalidParameter(format!(
                "min_level {min_level} exceeds max_level {max_level}"
            )));
        }
        let levels = (min_level..=max_level)
            .map(|level| {
                let stride = (1u64 << level) as f64;
                GridSpec {
                    level,
                    stride,
                    width: (image_width as f64 / stride).ceil() as usize,
                    height: (image_height as f64 / stride).ceil() as usize,
                }
            })
            .collect();
        Self::new(levels, base_scale, image_width as f64, image_height as f64)
    }

    pub fn min_level(&self) -> usize {
        self.levels[0].level
    }

    pub fn max_level(&self) -> usize {
        self.levels[self.levels.len() - 1].level
    }

    /// Grid for a semantic level id.
    pub fn grid(&self, level: usize) -> &GridSpec {
        &self.levels[level - self.min_level()]
    }

    /// `(height, width)` per level, in level order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|g| (g.height, g.width)).collect()
    }

    pub fn total_locations(&self) -> usize {
        self.levels.iter().map(|g| g.width * g.height).sum()
    }
}

/// One annotated object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
    /// Unique within an image.
    pub instance_id: usize,
}

/// Scale-based level assignment: logarithmic bucketing of sqrt(area) against
/// the pyramid's base scale, clamped to the available levels.
pub fn assign_level(gt: &GroundTruth, pyramid: &PyramidSpec) -> Result<usize> {
    let area = gt.bbox.area();
    if area <= 0.0 {
        return Err(Error::InvalidAnnotation(format!(
            "instance {} has a zero-area box",
            gt.instance_id
        )));
    }
    let l_min = pyramid.min_level() as isize;
    let l_max = pyramid.max_level() as isize;
    let raw = l_min + (area.sqrt() / pyramid.base_scale).log2().floor() as isize;
    Ok(raw.clamp(l_min, l_max) as usize)
}

/// Per-location label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Negative,
    Positive { instance: usize },
}

/// A feature location identified by semantic level and grid indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location {
    pub level: usize,
    pub i: usize,
    pub j: usize,
}

/// Labels and regression targets for one level.
#[derive(Debug, Clone)]
pub struct LevelAssignment {
    pub labels: Vec<Label>,
    /// Stride-normalized (l, t, r, b) target where the label is positive.
    pub targets: Vec<Option<[f64; 4]>>,
}

/// Full labeling of one image over all pyramid levels.
#[derive(Debug, Clone)]
pub struct AssignmentMap {
    pub pyramid: PyramidSpec,
    /// Aligned with `pyramid.levels`.
    pub levels: Vec<LevelAssignment>,
    /// Positive member locations per instance id, in (level, i, j) order.
    pub members: BTreeMap<usize, Vec<Location>>,
    /// Instances whose positive area captured no feature center.
    pub unassigned: Vec<usize>,
}

impl AssignmentMap {
    pub fn label_at(&self, loc: Location) -> Label {
        let grid = self.pyramid.grid(loc.level);
        self.levels[loc.level - self.pyramid.min_level()].labels[loc.i * grid.width + loc.j]
    }

    pub fn num_positives(&self) -> usize {
        self.members.values().map(Vec::len).sum()
    }

    /// Instances represented by at least one feature, i.e. the number of
    /// pooled predictions this image contributes during training.
    pub fn num_pooled_instances(&self) -> usize {
        self.members.len()
    }
}

/// Stride-normalized distances from a location center to the four box sides.
#[inline]
pub fn encode_target(center: Point, bbox: &BBox, stride: f64) -> [f64; 4] {
    [
        (center.x - bbox.x1) / stride,
        (center.y - bbox.y1) / stride,
        (bbox.x2 - center.x) / stride,
        (bbox.y2 - center.y) / stride,
    ]
}

/// Inverse of [`encode_target`]: side distances back to a corner-pair box.
#[inline]
pub fn decode_target(center: Point, ltrb: [f64; 4], stride: f64) -> BBox {
    BBox {
        x1: center.x - ltrb[0] * stride,
        y1: center.y - ltrb[1] * stride,
        x2: center.x + ltrb[2] * stride,
        y2: center.y + ltrb[3] * stride,
    }
}

/// Produces the per-location labeling for one image.
///
/// Every ground truth is assigned to one pyramid level; its positive area is
/// its box shrunk by `shrink`. A location takes the instance whose positive
/// area contains its center; among several the closest box center wins, ties
/// to the smaller instance id.
pub fn label_grid(gts: &[GroundTruth], pyramid: &PyramidSpec, shrink: f64) -> Result<AssignmentMap> {
    if !(shrink > 0.0 && shrink <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "shrink must be in (0, 1], got {shrink}"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for gt in gts {
        if !seen.insert(gt.instance_id) {
            return Err(Error::InvalidAnnotation(format!(
                "duplicate instance id {}",
                gt.instance_id
            )));
        }
    }

    // (positive area, assigned level) per instance, in input order.
    let mut areas = Vec::with_capacity(gts.len());
    for gt in gts {
        let level = assign_level(gt, pyramid)?;
        areas.push((gt, gt.bbox.shrink(shrink)?, level));
    }

    let mut levels = Vec::with_capacity(pyramid.levels.len());
    let mut members: BTreeMap<usize, Vec<Location>> = BTreeMap::new();

    for grid in &pyramid.levels {
        let mut labels = vec![Label::Negative; grid.width * grid.height];
        let mut targets = vec![None; grid.width * grid.height];
        let candidates: Vec<_> = areas.iter().filter(|(_, _, lvl)| *lvl == grid.level).collect();
        if !candidates.is_empty() {
            for i in 0..grid.height {
                for j in 0..grid.width {
                    let center = grid.center(i, j);
                    let mut best: Option<(f64, usize, &GroundTruth)> = None;
                    for (gt, pos_area, _) in &candidates {
                        if !pos_area.contains(center) {
                            continue;
                        }
                        let dist = gt.bbox.center_distance(center);
                        let better = match best {
                            None => true,
                            Some((bd, bid, _)) => {
                                dist < bd || (dist == bd && gt.instance_id < bid)
                            }
                        };
                        if better {
                            best = Some((dist, gt.instance_id, gt));
                        }
                    }
                    if let Some((_, id, gt)) = best {
                        let cell = i * grid.width + j;
                        labels[cell] = Label::Positive { instance: id };
                        targets[cell] = Some(encode_target(center, &gt.bbox, grid.stride));
                        members.entry(id).or_default().push(Location {
                            level: grid.level,
                            i,
                            j,
                        });
                    }
                }
            }
        }
        levels.push(LevelAssignment { labels, targets });
    }

    let unassigned = gts
        .iter()
        .map(|gt| gt.instance_id)
        .filter(|id| !members.contains_key(id))
        .collect();

    Ok(AssignmentMap {
        pyramid: pyramid.clone(),
        levels,
        members,
        unassigned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, instance_id: usize) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x1, y1, x2, y2),
            class_id,
            instance_id,
        }
    }

    fn single_level_pyramid(stride: f64, size: usize) -> PyramidSpec {
        PyramidSpec::new(
            vec![GridSpec {
                level: 0,
                stride,
                width: size,
                height: size,
            }],
            16.0,
            stride * size as f64,
            stride * size as f64,
        )
        .unwrap()
    }

    #[test]
    fn assign_level_at_base_scale() {
        let p = PyramidSpec::for_image(256, 256, 0, 2, 16.0).unwrap();
        let g = gt(0.0, 0.0, 16.0, 16.0, 0, 0);
        assert_eq!(assign_level(&g, &p).unwrap(), 0);
    }

    #[test]
    fn assign_level_clamps() {
        let p = PyramidSpec::for_image(256, 256, 0, 1, 16.0).unwrap();
        // area (4 * base)^2 would map to level 2; clamps to 1
        let g = gt(0.0, 0.0, 64.0, 64.0, 0, 0);
        assert_eq!(assign_level(&g, &p).unwrap(), 1);
    }

    #[test]
    fn assign_level_formula() {
        let p = PyramidSpec::for_image(512, 512, 0, 2, 32.0).unwrap();
        let g = gt(0.0, 0.0, 64.0, 64.0, 0, 0);
        assert_eq!(assign_level(&g, &p).unwrap(), 1);
    }

    #[test]
    fn assign_level_rejects_zero_area() {
        let p = PyramidSpec::for_image(256, 256, 0, 1, 16.0).unwrap();
        let g = gt(3.0, 3.0, 3.0, 9.0, 0, 0);
        assert!(assign_level(&g, &p).is_err());
    }

    #[test]
    fn full_coverage_single_instance() {
        let p = single_level_pyramid(8.0, 10);
        let gts = [gt(0.0, 0.0, 80.0, 80.0, 0, 0)];
        let map = label_grid(&gts, &p, 1.0).unwrap();
        assert!(map.levels[0]
            .labels
            .iter()
            .all(|l| *l == Label::Positive { instance: 0 }));
        assert_eq!(map.members[&0].len(), 100);
        assert!(map.unassigned.is_empty());
    }

    #[test]
    fn no_instances_all_negative() {
        let p = single_level_pyramid(8.0, 6);
        let map = label_grid(&[], &p, 0.4).unwrap();
        assert!(map.levels[0].labels.iter().all(|l| *l == Label::Negative));
        assert_eq!(map.num_pooled_instances(), 0);
    }

    #[test]
    fn equidistant_tie_goes_to_smaller_instance_id() {
        let p = single_level_pyramid(8.0, 6);
        // Centers (12,12) and (28,12); feature center (20,12) is 8 px from both.
        let gts = [
            gt(0.0, 0.0, 24.0, 24.0, 0, 0),
            gt(16.0, 0.0, 40.0, 24.0, 0, 1),
        ];
        let map = label_grid(&gts, &p, 1.0).unwrap();
        assert_eq!(
            map.label_at(Location { level: 0, i: 1, j: 2 }),
            Label::Positive { instance: 0 }
        );
    }

    /// Brute-force re-derivation of the labeling rule, kept independent of
    /// `label_grid` internals.
    fn brute_force_label(
        gts: &[GroundTruth],
        pyramid: &PyramidSpec,
        shrink: f64,
        loc: Location,
    ) -> Label {
        let grid = pyramid.grid(loc.level);
        let c = grid.center(loc.i, loc.j);
        let mut best: Option<(f64, usize)> = None;
        for g in gts {
            if assign_level(g, pyramid).unwrap() != loc.level {
                continue;
            }
            let area = g.bbox.shrink(shrink).unwrap();
            if !area.contains(c) {
                continue;
            }
            let d = g.bbox.center_distance(c);
            best = match best {
                None => Some((d, g.instance_id)),
                Some((bd, bid)) if d < bd || (d == bd && g.instance_id < bid) => {
                    Some((d, g.instance_id))
                }
                keep => keep,
            };
        }
        match best {
            Some((_, id)) => Label::Positive { instance: id },
            None => Label::Negative,
        }
    }

    #[test]
    fn derived_positive_set_matches_brute_force() {
        let p = single_level_pyramid(8.0, 10);
        let gts = [gt(8.0, 8.0, 72.0, 72.0, 0, 0)];
        let map = label_grid(&gts, &p, 0.4).unwrap();
        let shrunk = gts[0].bbox.shrink(0.4).unwrap();
        assert_eq!(shrunk, BBox::new(27.2, 27.2, 52.8, 52.8));
        for i in 0..10 {
            for j in 0..10 {
                let loc = Location { level: 0, i, j };
                let expect = if shrunk.contains(p.grid(0).center(i, j)) {
                    Label::Positive { instance: 0 }
                } else {
                    Label::Negative
                };
                assert_eq!(map.label_at(loc), expect, "at ({i},{j})");
                assert_eq!(map.label_at(loc), brute_force_label(&gts, &p, 0.4, loc));
            }
        }
        assert_eq!(map.members[&0].len(), 16);
    }

    #[test]
    fn tiny_instance_is_reported_unassigned() {
        let p = single_level_pyramid(8.0, 10);
        // Shrunk area (off grid centers) captures nothing.
        let gts = [gt(8.5, 8.5, 11.0, 11.0, 0, 7)];
        let map = label_grid(&gts, &p, 0.4).unwrap();
        assert_eq!(map.unassigned, vec![7]);
        assert_eq!(map.num_pooled_instances(), 0);
    }

    fn arb_gts() -> impl Strategy<Value = Vec<GroundTruth>> {
        proptest::collection::vec(
            (5.0..80.0f64, 5.0..80.0f64, 8.0..40.0f64, 8.0..40.0f64, 0usize..3),
            0..5,
        )
        .prop_map(|raw| {
            raw.into_iter()
                .enumerate()
                .map(|(idx, (x, y, w, h, class_id))| GroundTruth {
                    bbox: BBox::new(x, y, (x + w).min(120.0), (y + h).min(120.0)),
                    class_id,
                    instance_id: idx,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn labels_partition_all_locations(gts in arb_gts(), shrink in 0.2..1.0f64) {
            let p = PyramidSpec::for_image(128, 128, 2, 4, 10.0).unwrap();
            let map = label_grid(&gts, &p, shrink).unwrap();
            let positives = map.num_positives();
            let negatives: usize = map
                .levels
                .iter()
                .map(|l| l.labels.iter().filter(|&&l| l == Label::Negative).count())
                .sum();
            prop_assert_eq!(positives + negatives, p.total_locations());
        }

        #[test]
        fn shrink_monotone_positive_sets(gts in arb_gts(), s1 in 0.2..1.0f64, s2 in 0.2..1.0f64) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let p = PyramidSpec::for_image(128, 128, 2, 4, 10.0).unwrap();
            let small = label_grid(&gts, &p, lo).unwrap();
            let big = label_grid(&gts, &p, hi).unwrap();
            for (ls, lb) in small.levels.iter().zip(&big.levels) {
                for (a, b) in ls.labels.iter().zip(&lb.labels) {
                    if matches!(a, Label::Positive { .. }) {
                        prop_assert!(matches!(b, Label::Positive { .. }));
                    }
                }
            }
        }

        #[test]
        fn positives_only_on_assigned_level(gts in arb_gts(), shrink in 0.2..1.0f64) {
            let p = PyramidSpec::for_image(128, 128, 2, 4, 10.0).unwrap();
            let map = label_grid(&gts, &p, shrink).unwrap();
            for (id, locs) in &map.members {
                let g = gts.iter().find(|g| g.instance_id == *id).unwrap();
                let lvl = assign_level(g, &p).unwrap();
                prop_assert!(locs.iter().all(|l| l.level == lvl));
            }
        }

        #[test]
        fn label_grid_is_deterministic(gts in arb_gts(), shrink in 0.2..1.0f64) {
            let p = PyramidSpec::for_image(128, 128, 2, 4, 10.0).unwrap();
            let a = label_grid(&gts, &p, shrink).unwrap();
            let b = label_grid(&gts, &p, shrink).unwrap();
            for (la, lb) in a.levels.iter().zip(&b.levels) {
                prop_assert_eq!(&la.labels, &lb.labels);
            }
            prop_assert_eq!(&a.members, &b.members);
        }
    }
}
