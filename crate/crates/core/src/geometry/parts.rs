//! Garment categories, body parts and the oriented part boxes built from
//! skeletal keypoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Joint, KeypointSet};

/// Default widening of a part box, as a fraction of its axis length.
pub const DEFAULT_BOX_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GarmentKind {
    Upper,
    Lower,
    Dress,
}

impl FromStr for GarmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upper" => Ok(Self::Upper),
            "lower" => Ok(Self::Lower),
            "dress" => Ok(Self::Dress),
            other => Err(Error::InvalidArgument(format!(
                "unknown garment category `{other}` (expected upper, lower or dress)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartId {
    Torso,
    LeftUpperArm,
    RightUpperArm,
    LeftLowerArm,
    RightLowerArm,
    HipAbove,
    LeftUpperLeg,
    RightUpperLeg,
    LeftLowerLeg,
    RightLowerLeg,
    DressUpper,
    DressLower,
}

impl fmt::Display for PartId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("part id serializes");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GarmentCategory {
    kind: GarmentKind,
    parts: Vec<PartId>,
}

impl GarmentCategory {
    pub fn new(kind: GarmentKind) -> Self {
        use PartId::*;
        let parts = match kind {
            GarmentKind::Upper => vec![Torso, LeftUpperArm, RightUpperArm, LeftLowerArm, RightLowerArm],
            GarmentKind::Lower => vec![HipAbove, LeftUpperLeg, RightUpperLeg, LeftLowerLeg, RightLowerLeg],
            GarmentKind::Dress => vec![DressUpper, DressLower],
        };
        Self { kind, parts }
    }

    pub fn kind(&self) -> GarmentKind {
        self.kind
    }

    /// Parts in composition order.
    pub fn parts(&self) -> &[PartId] {
        &self.parts
    }
}

/// Maps a parser's label vocabulary onto body parts.
///
/// The default table uses the following labels: 0 background, 1 face,
/// 2 hair, 3 torso, 4/5 left/right upper arm, 6/7 left/right lower arm,
/// 8 hip, 9/10 left/right upper leg, 11/12 left/right lower leg,
/// 13/14 left/right hand, 15/16 left/right foot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTable {
    /// Every label a parsing map may contain.
    pub vocabulary: Vec<u8>,
    /// Labels that count as exposed skin for color estimation.
    pub skin: Vec<u8>,
    /// Labels belonging to each part.
    pub parts: BTreeMap<PartId, Vec<u8>>,
}

impl Default for LabelTable {
    fn default() -> Self {
        use PartId::*;
        let parts = BTreeMap::from([
            (Torso, vec![3]),
            (LeftUpperArm, vec![4]),
            (RightUpperArm, vec![5]),
            (LeftLowerArm, vec![6]),
            (RightLowerArm, vec![7]),
            (HipAbove, vec![8]),
            (LeftUpperLeg, vec![9]),
            (RightUpperLeg, vec![10]),
            (LeftLowerLeg, vec![11]),
            (RightLowerLeg, vec![12]),
            (DressUpper, vec![3, 4, 5]),
            (DressLower, vec![8, 9, 10, 11, 12]),
        ]);
        Self {
            vocabulary: (0..=16).collect(),
            skin: vec![1, 4, 5, 6, 7, 9, 10, 11, 12],
            parts,
        }
    }
}

impl LabelTable {
    pub fn labels(&self, part: PartId) -> &[u8] {
        self.parts.get(&part).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub type Quad = [Point2<f64>; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct PartBox {
    pub part: PartId,
    /// Corners in polygon order, or `None` when a defining joint is missing.
    pub corners: Option<Quad>,
    pub joints: Vec<Joint>,
}

impl PartBox {
    pub fn is_present(&self) -> bool {
        self.corners.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartBoxes {
    pub boxes: Vec<PartBox>,
}

impl PartBoxes {
    pub fn get(&self, part: PartId) -> Option<&PartBox> {
        self.boxes.iter().find(|b| b.part == part)
    }

    pub fn present(&self) -> impl Iterator<Item = (PartId, &Quad)> {
        self.boxes
            .iter()
            .filter_map(|b| b.corners.as_ref().map(|q| (b.part, q)))
    }
}

fn joints_for(part: PartId) -> Vec<Joint> {
    use Joint::*;
    use PartId::*;
    match part {
        Torso | DressUpper => vec![RightShoulder, LeftShoulder, RightHip, LeftHip],
        LeftUpperArm => vec![LeftShoulder, LeftElbow],
        RightUpperArm => vec![RightShoulder, RightElbow],
        LeftLowerArm => vec![LeftElbow, LeftWrist],
        RightLowerArm => vec![RightElbow, RightWrist],
        HipAbove => vec![RightHip, LeftHip, Neck],
        LeftUpperLeg => vec![LeftHip, LeftKnee],
        RightUpperLeg => vec![RightHip, RightKnee],
        LeftLowerLeg => vec![LeftKnee, LeftAnkle],
        RightLowerLeg => vec![RightKnee, RightAnkle],
        DressLower => vec![RightHip, LeftHip, RightAnkle, LeftAnkle],
    }
}

/// Box around the segment `a -> b`, widened on both sides by `margin * |b - a|`.
fn limb_box(a: Point2<f64>, b: Point2<f64>, margin: f64) -> Option<Quad> {
    let axis = b - a;
    let len = axis.norm();
    if len < 1e-9 {
        return None;
    }
    let normal = Vector2::new(-axis.y, axis.x) / len;
    let off = normal * (margin * len);
    Some([a + off, b + off, b - off, a - off])
}

/// Quadrilateral spanning the pair `top` to the pair `bottom`. Each pair is
/// pushed outward along its own direction by `margin / 2` of its length.
fn span_box(top: (Point2<f64>, Point2<f64>), bottom: (Point2<f64>, Point2<f64>), margin: f64) -> Option<Quad> {
    let widen = |(r, l): (Point2<f64>, Point2<f64>)| {
        let d = r - l;
        (r + d * (margin / 2.0), l - d * (margin / 2.0))
    };
    let (tr, tl) = widen(top);
    let (br, bl) = widen(bottom);
    let quad = [tr, tl, bl, br];
    (polygon_area(&quad).abs() > 1e-9).then_some(quad)
}

fn polygon_area(q: &Quad) -> f64 {
    let mut a = 0.0;
    for i in 0..4 {
        let (p, r) = (q[i], q[(i + 1) % 4]);
        a += p.x * r.y - r.x * p.y;
    }
    a / 2.0
}

/// Builds one oriented box per part of `category`. Parts with a missing
/// defining joint are reported with `corners = None`.
pub fn group_keypoints_to_parts(kp: &KeypointSet, category: &GarmentCategory, margin: f64) -> PartBoxes {
    use PartId::*;
    let boxes = category
        .parts()
        .iter()
        .map(|&part| {
            let joints = joints_for(part);
            let pts: Option<Vec<Point2<f64>>> = joints
                .iter()
                .map(|&j| kp.get(j).map(|k| Point2::new(k.x, k.y)))
                .collect();
            let corners = pts.and_then(|p| match part {
                Torso | DressUpper | DressLower => span_box((p[0], p[1]), (p[2], p[3]), margin),
                HipAbove => {
                    let (r, l, neck) = (p[0], p[1], p[2]);
                    let mid = nalgebra::center(&r, &l);
                    let up = (neck - mid) * margin;
                    span_box((r + up, l + up), (r, l), margin)
                }
                _ => limb_box(p[0], p[1], margin),
            });
            PartBox { part, corners, joints }
        })
        .collect();
    PartBoxes { boxes }
}

/// Inclusive point-in-polygon test: points on an edge count as inside.
pub fn point_in_quad(q: &Quad, p: Point2<f64>) -> bool {
    const EPS: f64 = 1e-9;
    for i in 0..4 {
        let (a, b) = (q[i], q[(i + 1) % 4]);
        let ab = b - a;
        let ap = p - a;
        let cross = ab.x * ap.y - ab.y * ap.x;
        let scale = ab.norm().max(1.0);
        if cross.abs() <= EPS * scale {
            let t = ap.dot(&ab);
            if t >= -EPS && t <= ab.norm_squared() + EPS {
                return true;
            }
        }
    }
    let mut inside = false;
    for i in 0..4 {
        let (a, b) = (q[i], q[(i + 1) % 4]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}
