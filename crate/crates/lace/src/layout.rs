//! Layout data model: elements with class labels and normalized boxes, the
//! fixed-length padded layout, and the continuous state matrix the diffusion
//! process operates on, plus conversions between them.
//!
//! Coordinates are canvas-relative ratios. A box is (cx, cy, w, h); the six
//! derived edge coordinates (left, x-center, right, top, y-center, bottom)
//! drive the alignment machinery.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Dimensions of the model's layout space: `n_classes` real classes (labels
/// `0..n_classes`), one extra padding class, and `max_elements` rows per
/// layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSchema {
    pub n_classes: usize,
    pub max_elements: usize,
}

impl LayoutSchema {
    pub fn new(n_classes: usize, max_elements: usize) -> Result<Self> {
        if n_classes == 0 || max_elements == 0 {
            return Err(Error::Config(
                "layout schema needs at least one class and one element slot".into(),
            ));
        }
        Ok(LayoutSchema { n_classes, max_elements })
    }

    /// Class id used for padding rows (one past the last real class).
    pub fn padding_class(&self) -> usize {
        self.n_classes
    }

    /// Width of the label block: real classes plus the padding class.
    pub fn label_dim(&self) -> usize {
        self.n_classes + 1
    }

    /// Total per-row width of the state matrix: label block plus 4 geometry
    /// columns.
    pub fn state_dim(&self) -> usize {
        self.n_classes + 5
    }
}

impl Default for LayoutSchema {
    fn default() -> Self {
        LayoutSchema { n_classes: 5, max_elements: 25 }
    }
}

/// Axis-aligned box in canvas-relative units: center, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const ZERO: BBox = BBox { cx: 0.0, cy: 0.0, w: 0.0, h: 0.0 };

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { cx: v[0], cy: v[1], w: v[2], h: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

/// One layout element: class label plus box. Padding elements carry the
/// schema's padding class and a zero box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub label: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl Element {
    pub fn new(label: usize, bbox: BBox) -> Self {
        Element { label, bbox }
    }

    pub fn padding(schema: &LayoutSchema) -> Self {
        Element { label: schema.padding_class(), bbox: BBox::ZERO }
    }
}

/// A fixed-length layout: exactly `max_elements` entries, the first `n_real`
/// of which are real elements, the rest padding. Canvas dimensions are pixel
/// counts and only matter for rendering and threshold scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub canvas: (u32, u32),
    elements: Vec<Element>,
    n_real: usize,
}

impl Layout {
    /// Builds a layout from its real elements, padding up to the schema's
    /// row count. Rejects overlong inputs, invalid labels, and non-positive
    /// canvases.
    pub fn new(canvas: (u32, u32), real_elements: Vec<Element>, schema: &LayoutSchema) -> Result<Self> {
        if canvas.0 == 0 || canvas.1 == 0 {
            return Err(Error::Data("canvas dimensions must be positive".into()));
        }
        if real_elements.len() > schema.max_elements {
            return Err(Error::Data(format!(
                "layout has {} elements but at most {} fit",
                real_elements.len(),
                schema.max_elements
            )));
        }
        for (i, el) in real_elements.iter().enumerate() {
            if el.label >= schema.n_classes {
                return Err(Error::Data(format!(
                    "element {} has label {} outside 0..{}",
                    i, el.label, schema.n_classes
                )));
            }
        }
        let n_real = real_elements.len();
        let mut elements = real_elements;
        elements.resize(schema.max_elements, Element::padding(schema));
        Ok(Layout { canvas, elements, n_real })
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    /// All rows, padding included.
    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    /// The real (non-padding) elements.
    pub fn real_elements(&self) -> &[Element] {
        &self.elements[..self.n_real]
    }

    /// Copy of this layout with the real elements' boxes replaced row by row
    /// from an n_real x 4 matrix in (cx, cy, w, h) order; labels, padding,
    /// and canvas are untouched.
    pub fn with_real_boxes(&self, boxes: &Array2<f64>) -> Result<Layout> {
        if boxes.nrows() != self.n_real || boxes.ncols() != 4 {
            return Err(Error::Data(format!(
                "geometry matrix is {}x{} but the layout has {} real elements",
                boxes.nrows(),
                boxes.ncols(),
                self.n_real
            )));
        }
        let mut updated = self.clone();
        for (i, el) in updated.elements[..self.n_real].iter_mut().enumerate() {
            el.bbox = BBox::new(boxes[[i, 0]], boxes[[i, 1]], boxes[[i, 2]], boxes[[i, 3]]);
        }
        Ok(updated)
    }

    /// Checks the well-formedness conditions for clean (fully denoised) data:
    /// box components in [0,1] and edges within the canvas up to `eps_geom`.
    pub fn validate_clean(&self, eps_geom: f64) -> Result<()> {
        for (i, el) in self.real_elements().iter().enumerate() {
            let b = el.bbox;
            for v in b.as_array() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Data(format!(
                        "element {} has box component {} outside [0,1]",
                        i, v
                    )));
                }
            }
            let edges = box_to_edges(&b);
            if edges.left < -eps_geom
                || edges.right > 1.0 + eps_geom
                || edges.top < -eps_geom
                || edges.bottom > 1.0 + eps_geom
            {
                return Err(Error::Data(format!(
                    "element {} extends past the canvas (eps_geom={})",
                    i, eps_geom
                )));
            }
        }
        Ok(())
    }
}

/// The six edge coordinates of a box, in the canonical order used everywhere
/// alignment types are enumerated: left, x-center, right, top, y-center,
/// bottom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxEdges {
    pub left: f64,
    pub x_center: f64,
    pub right: f64,
    pub top: f64,
    pub y_center: f64,
    pub bottom: f64,
}

impl BoxEdges {
    pub fn as_array(&self) -> [f64; 6] {
        [self.left, self.x_center, self.right, self.top, self.y_center, self.bottom]
    }
}

/// Alignment/edge kinds in canonical tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Left,
    XCenter,
    Right,
    Top,
    YCenter,
    Bottom,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 6] = [
        EdgeKind::Left,
        EdgeKind::XCenter,
        EdgeKind::Right,
        EdgeKind::Top,
        EdgeKind::YCenter,
        EdgeKind::Bottom,
    ];

    /// Index into `BoxEdges::as_array` order.
    pub fn index(&self) -> usize {
        match self {
            EdgeKind::Left => 0,
            EdgeKind::XCenter => 1,
            EdgeKind::Right => 2,
            EdgeKind::Top => 3,
            EdgeKind::YCenter => 4,
            EdgeKind::Bottom => 5,
        }
    }

    /// True for left/x-center/right (gradients flow to cx and w), false for
    /// the vertical trio (cy and h).
    pub fn is_horizontal(&self) -> bool {
        matches!(self, EdgeKind::Left | EdgeKind::XCenter | EdgeKind::Right)
    }
}

/// Linear map from (cx, cy, w, h) to the six edges.
pub fn box_to_edges(b: &BBox) -> BoxEdges {
    BoxEdges {
        left: b.cx - b.w / 2.0,
        x_center: b.cx,
        right: b.cx + b.w / 2.0,
        top: b.cy - b.h / 2.0,
        y_center: b.cy,
        bottom: b.cy + b.h / 2.0,
    }
}

/// Inverse of `box_to_edges` for consistent edge sets.
pub fn edges_to_box(e: &BoxEdges) -> BBox {
    BBox {
        cx: (e.left + e.right) / 2.0,
        cy: (e.top + e.bottom) / 2.0,
        w: e.right - e.left,
        h: e.bottom - e.top,
    }
}

/// Continuous diffusion state: a `max_elements x (n_classes + 5)` matrix of
/// label logits and geometry, tagged with its noise level. At t = 0 label
/// blocks are one-hot; at t > 0 values are unconstrained reals.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub values: Array2<f64>,
    pub timestep: usize,
}

impl StateVector {
    pub fn new(values: Array2<f64>, timestep: usize) -> Self {
        StateVector { values, timestep }
    }

    pub fn zeros_like(&self) -> Array2<f64> {
        Array2::zeros(self.values.dim())
    }

    /// Errors unless the matrix matches the schema's dimensions.
    pub fn check_shape(&self, schema: &LayoutSchema) -> Result<()> {
        let (rows, cols) = self.values.dim();
        if rows != schema.max_elements || cols != schema.state_dim() {
            return Err(Error::Config(format!(
                "state is {}x{} but schema needs {}x{}",
                rows,
                cols,
                schema.max_elements,
                schema.state_dim()
            )));
        }
        Ok(())
    }
}

/// Encodes a layout as a clean (t = 0) state: one-hot label block followed by
/// the four box values per row; padding rows are one-hot on the padding class
/// with zero geometry.
pub fn encode_layout(layout: &Layout, schema: &LayoutSchema) -> Result<StateVector> {
    let mut values = Array2::zeros((schema.max_elements, schema.state_dim()));
    if layout.elements().len() != schema.max_elements {
        return Err(Error::Config(format!(
            "layout has {} rows but schema expects {}",
            layout.elements().len(),
            schema.max_elements
        )));
    }
    for (i, el) in layout.elements().iter().enumerate() {
        if el.label > schema.padding_class() {
            return Err(Error::Data(format!(
                "element {} has label {} beyond the padding class {}",
                i,
                el.label,
                schema.padding_class()
            )));
        }
        values[[i, el.label]] = 1.0;
        let geo = schema.label_dim();
        let b = el.bbox.as_array();
        for (k, v) in b.iter().enumerate() {
            values[[i, geo + k]] = *v;
        }
    }
    Ok(StateVector::new(values, 0))
}

/// Decodes an arbitrary real-valued state into a layout: per row, the label
/// is the argmax of the label block (ties broken toward the lowest class id);
/// padding-class rows become padding; boxes are clamped to [0,1]. Real rows
/// keep their relative order but are compacted to the front so the result
/// satisfies the layout invariants. Total function: never fails.
pub fn decode_layout(state: &StateVector, schema: &LayoutSchema, canvas: (u32, u32)) -> Layout {
    let geo = schema.label_dim();
    let mut real = Vec::new();
    for row in state.values.rows() {
        let mut best = 0usize;
        for k in 1..geo {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best == schema.padding_class() {
            continue;
        }
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        real.push(Element::new(
            best,
            BBox::new(clamp(row[geo]), clamp(row[geo + 1]), clamp(row[geo + 2]), clamp(row[geo + 3])),
        ));
    }
    Layout::new(canvas, real, schema).expect("decoded rows always fit the schema")
}
