//! User layouts: prompt, per-object boxes and phrases, optional spatial
//! relations, and rasterization of boxes onto the attention grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::tokenize;
use crate::diffmath::DenseMatrix;

pub const DEFAULT_RESOLUTION: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("invalid layout field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("malformed layout document: {0}")]
    Malformed(String),
    #[error("{0}")]
    Contract(String),
}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> LayoutError {
    LayoutError::Field {
        field: field.into(),
        message: message.into(),
    }
}

/// Axis-aligned box in normalized image coordinates, origin top-left,
/// `x` along columns and `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, LayoutError> {
        let coords = [x0, y0, x1, y1];
        if coords.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(field_err("box", format!("coordinates {coords:?} outside [0,1]")));
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(field_err("box", format!("degenerate extent {coords:?}")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// True when the boxes touch or sit within `gap` of each other along one
    /// axis while overlapping along the other.
    pub fn is_adjacent(&self, other: &Self, gap: f64) -> bool {
        let dx = (self.x0.max(other.x0) - self.x1.min(other.x1)).max(0.0);
        let dy = (self.y0.max(other.y0) - self.y1.min(other.y1)).max(0.0);
        let x_overlap = self.x1.min(other.x1) > self.x0.max(other.x0);
        let y_overlap = self.y1.min(other.y1) > self.y0.max(other.y0);
        (x_overlap && dy <= gap) || (y_overlap && dx <= gap)
    }

    fn as_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phrase {
    pub text: String,
    /// Positions of the phrase's tokens in the full token sequence, where
    /// position 0 is the start token.
    pub span: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Left,
    Right,
    Above,
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub a: usize,
    pub b: usize,
    pub kind: RelationKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutObject {
    pub bbox: BoundingBox,
    pub phrase: Phrase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub prompt: String,
    pub objects: Vec<LayoutObject>,
    pub relations: Vec<Relation>,
    /// Number of tokens including start and end tokens.
    pub token_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    phrase: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutDoc {
    prompt: String,
    objects: Vec<ObjectDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    relations: Vec<Relation>,
}

/// Finds `needle` as a contiguous run of `hay`, preferring runs that do not
/// overlap positions already claimed by earlier phrases.
fn find_span(hay: &[String], needle: &[String], claimed: &[usize]) -> Option<Vec<usize>> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    let hits: Vec<usize> = (0..=hay.len() - needle.len())
        .filter(|&s| hay[s..s + needle.len()] == *needle)
        .collect();
    let free = hits
        .iter()
        .find(|&&s| (s..s + needle.len()).all(|p| !claimed.contains(&(p + 1))));
    free.or(hits.first())
        .map(|&s| (s + 1..s + 1 + needle.len()).collect())
}

impl Layout {
    pub fn k(&self) -> usize {
        self.objects.len()
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    /// Builds and validates a layout from raw parts.
    pub fn new(
        prompt: &str,
        objects: &[(&str, [f64; 4])],
        relations: Vec<Relation>,
    ) -> Result<Self, LayoutError> {
        let doc = LayoutDoc {
            prompt: prompt.to_string(),
            objects: objects
                .iter()
                .map(|(p, b)| ObjectDoc {
                    phrase: p.to_string(),
                    bbox: *b,
                })
                .collect(),
            relations,
        };
        Self::from_doc(doc)
    }

    fn from_doc(doc: LayoutDoc) -> Result<Self, LayoutError> {
        let tokens = tokenize(&doc.prompt);
        if tokens.is_empty() {
            return Err(field_err("prompt", "no tokens"));
        }
        if doc.objects.is_empty() {
            return Err(field_err("objects", "at least one object is required"));
        }
        let mut claimed = Vec::new();
        let mut objects = Vec::with_capacity(doc.objects.len());
        for (i, obj) in doc.objects.into_iter().enumerate() {
            let [x0, y0, x1, y1] = obj.bbox;
            let bbox = BoundingBox::new(x0, y0, x1, y1).map_err(|e| match e {
                LayoutError::Field { message, .. } => {
                    field_err(format!("objects[{i}].box"), message)
                }
                other => other,
            })?;
            let needle = tokenize(&obj.phrase);
            let span = find_span(&tokens, &needle, &claimed).ok_or_else(|| {
                field_err(
                    format!("objects[{i}].phrase"),
                    format!("\"{}\" does not occur in the prompt", obj.phrase),
                )
            })?;
            claimed.extend(&span);
            objects.push(LayoutObject {
                bbox,
                phrase: Phrase {
                    text: obj.phrase,
                    span,
                },
            });
        }
        for (i, r) in doc.relations.iter().enumerate() {
            if r.a >= objects.len() || r.b >= objects.len() || r.a == r.b {
                return Err(field_err(
                    format!("relations[{i}]"),
                    format!("indices ({}, {}) invalid for {} objects", r.a, r.b, objects.len()),
                ));
            }
        }
        Ok(Self {
            prompt: doc.prompt,
            objects,
            relations: doc.relations,
            token_count: tokens.len() + 2,
        })
    }

    pub fn to_json(&self) -> String {
        let doc = LayoutDoc {
            prompt: self.prompt.clone(),
            objects: self
                .objects
                .iter()
                .map(|o| ObjectDoc {
                    phrase: o.phrase.text.clone(),
                    bbox: o.bbox.as_array(),
                })
                .collect(),
            relations: self.relations.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("layout serializes")
    }

    pub fn masks(&self, resolution: usize) -> Vec<Mask> {
        self.objects
            .iter()
            .map(|o| rasterize_box(&o.bbox, resolution))
            .collect()
    }
}

pub fn parse_layout(text: &str) -> Result<Layout, LayoutError> {
    let doc: LayoutDoc =
        serde_json::from_str(text).map_err(|e| LayoutError::Malformed(e.to_string()))?;
    Layout::from_doc(doc)
}

/// Binary occupancy grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    resolution: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn empty(resolution: usize) -> Self {
        Self {
            resolution,
            cells: vec![false; resolution * resolution],
        }
    }

    pub fn from_cells(resolution: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), resolution * resolution);
        Self { resolution, cells }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.resolution + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.cells[r * self.resolution + c] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn and(&self, other: &Self) -> Self {
        Self {
            resolution: self.resolution,
            cells: self.cells.iter().zip(&other.cells).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn and_not(&self, other: &Self) -> Self {
        Self {
            resolution: self.resolution,
            cells: self.cells.iter().zip(&other.cells).map(|(a, b)| *a && !*b).collect(),
        }
    }

    /// `q x 1` column of zeros and ones in row-major cell order.
    pub fn to_column(&self) -> DenseMatrix {
        DenseMatrix::column_vector(self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())
    }
}

/// Cell `(r, c)` is set iff its center lies in the half-open box
/// `[x0, x1) x [y0, y1)`. A box that catches no center sets the single cell
/// holding the box center.
pub fn rasterize_box(b: &BoundingBox, resolution: usize) -> Mask {
    let res = resolution as f64;
    let mut mask = Mask::empty(resolution);
    for r in 0..resolution {
        let cy = (r as f64 + 0.5) / res;
        if cy < b.y0 || cy >= b.y1 {
            continue;
        }
        for c in 0..resolution {
            let cx = (c as f64 + 0.5) / res;
            if cx >= b.x0 && cx < b.x1 {
                mask.set(r, c, true);
            }
        }
    }
    if mask.count() == 0 {
        let (cx, cy) = b.center();
        let c = ((cx * res) as usize).min(resolution - 1);
        let r = ((cy * res) as usize).min(resolution - 1);
        mask.set(r, c, true);
    }
    mask
}

/// True when `rasterize_box` had to fall back to the center cell.
pub fn is_degenerate(b: &BoundingBox, resolution: usize) -> bool {
    let res = resolution as f64;
    let hits = |lo: f64, hi: f64| (0..resolution).any(|i| {
        let c = (i as f64 + 0.5) / res;
        c >= lo && c < hi
    });
    !(hits(b.x0, b.x1) && hits(b.y0, b.y1))
}

pub fn union_mask(masks: &[Mask]) -> Result<Mask, LayoutError> {
    let first = masks
        .first()
        .ok_or_else(|| LayoutError::Contract("union of an empty mask list".into()))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        if m.resolution != first.resolution {
            return Err(LayoutError::Contract(format!(
                "resolution mismatch {} vs {}",
                m.resolution, first.resolution
            )));
        }
        for (o, &v) in out.cells.iter_mut().zip(&m.cells) {
            *o |= v;
        }
    }
    Ok(out)
}
