//! Corpus plumbing: newline-delimited JSON ingest/write with validation and
//! per-line skip reporting, plus a seeded synthetic grid generator whose
//! layouts are aligned and non-overlapping by construction.

use crate::constraints::{local_alignment_loss, overlap_loss};
use crate::error::{Error, Result};
use crate::layout::{BBox, Element, Layout, LayoutSchema};
use crate::rng::derive_stream;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::BufRead;
use std::path::Path;

/// One corpus line: canvas in pixels and the real elements only.
#[derive(Debug, Serialize, Deserialize)]
struct LayoutRecord {
    canvas: (u32, u32),
    elements: Vec<Element>,
}

/// What ingest kept and what it rejected, with per-line reasons.
#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub kept: usize,
    pub class_histogram: Vec<usize>,
    pub length_histogram: Vec<usize>,
    pub skipped: Vec<(usize, String)>,
}

impl IngestReport {
    fn new(schema: &LayoutSchema) -> Self {
        IngestReport {
            kept: 0,
            class_histogram: vec![0; schema.n_classes],
            length_histogram: vec![0; schema.max_elements + 1],
            skipped: Vec::new(),
        }
    }

    fn record(&mut self, layout: &Layout) {
        self.kept += 1;
        self.length_histogram[layout.n_real()] += 1;
        for el in layout.real_elements() {
            self.class_histogram[el.label] += 1;
        }
    }
}

impl std::fmt::Display for IngestReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "kept {} layouts, skipped {}", self.kept, self.skipped.len())?;
        writeln!(f, "class histogram: {:?}", self.class_histogram)?;
        let lengths: Vec<(usize, usize)> = self
            .length_histogram
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(l, c)| (l, *c))
            .collect();
        writeln!(f, "length histogram: {:?}", lengths)?;
        for (line, reason) in &self.skipped {
            writeln!(f, "  line {}: {}", line, reason)?;
        }
        Ok(())
    }
}

fn layout_from_record(record: LayoutRecord, schema: &LayoutSchema) -> Result<Layout> {
    if record.elements.is_empty() {
        return Err(Error::Data("layout has no elements".into()));
    }
    if record.elements.len() > schema.max_elements {
        return Err(Error::Data(format!(
            "layout has {} elements, maximum is {}",
            record.elements.len(),
            schema.max_elements
        )));
    }
    for el in &record.elements {
        if el.label >= schema.n_classes {
            return Err(Error::Data(format!(
                "label {} out of range (classes: {})",
                el.label, schema.n_classes
            )));
        }
    }
    Layout::new(record.canvas, record.elements, schema)
}

/// Reads a JSONL corpus. Malformed or invalid lines are skipped and reported
/// with their 1-based line numbers; an empty result is an error.
pub fn read_corpus(path: &Path, schema: &LayoutSchema) -> Result<(Vec<Layout>, IngestReport)> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut layouts = Vec::new();
    let mut report = IngestReport::new(schema);
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            report.skipped.push((line_no, "blank line".into()));
            continue;
        }
        let record: LayoutRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.skipped.push((line_no, format!("malformed JSON: {}", e)));
                continue;
            }
        };
        match layout_from_record(record, schema) {
            Ok(layout) => {
                report.record(&layout);
                layouts.push(layout);
            }
            Err(e) => report.skipped.push((line_no, format!("{}", e))),
        }
    }
    if layouts.is_empty() {
        return Err(Error::Data(format!(
            "no valid layouts in {} ({} lines skipped)",
            path.display(),
            report.skipped.len()
        )));
    }
    Ok((layouts, report))
}

/// Serializes one layout as a corpus line (real elements only).
pub fn layout_to_json_line(layout: &Layout) -> Result<String> {
    let record = LayoutRecord {
        canvas: layout.canvas,
        elements: layout.real_elements().to_vec(),
    };
    Ok(serde_json::to_string(&record)?)
}

/// Writes a corpus atomically as JSONL, one layout per line.
pub fn write_corpus(path: &Path, layouts: &[Layout]) -> Result<()> {
    let mut out = String::new();
    for layout in layouts {
        out.push_str(&layout_to_json_line(layout)?);
        out.push('\n');
    }
    crate::checkpoint::write_atomic(path, out.as_bytes())
}

/// Parameters of the synthetic grid generator. Geometry is in normalized
/// canvas units; `margin` pads all four sides, `gutter` separates both
/// columns and rows. Row heights vary per layout but are shared across
/// columns, so every horizontal edge lines up exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGridSpec {
    pub columns: usize,
    pub rows_min: usize,
    pub rows_max: usize,
    pub n_classes: usize,
    pub margin: f64,
    pub gutter: f64,
    pub canvas: (u32, u32),
    pub seed: u64,
}

impl Default for SyntheticGridSpec {
    fn default() -> Self {
        SyntheticGridSpec {
            columns: 2,
            rows_min: 2,
            rows_max: 4,
            n_classes: 5,
            margin: 0.06,
            gutter: 0.02,
            canvas: (816, 1056),
            seed: 0,
        }
    }
}

impl SyntheticGridSpec {
    pub fn validate(&self, schema: &LayoutSchema) -> Result<()> {
        if !(1..=2).contains(&self.columns) {
            return Err(Error::Config(format!("columns must be 1 or 2, got {}", self.columns)));
        }
        if self.rows_min < 2 || self.rows_max < self.rows_min {
            return Err(Error::Config(format!(
                "rows range {}..={} invalid (need at least 2 rows, non-empty range)",
                self.rows_min, self.rows_max
            )));
        }
        if self.n_classes == 0 || self.n_classes > schema.n_classes {
            return Err(Error::Config(format!(
                "palette of {} classes exceeds schema's {}",
                self.n_classes, schema.n_classes
            )));
        }
        if self.columns * self.rows_max > schema.max_elements {
            return Err(Error::Config(format!(
                "grid of {} cells exceeds the {}-element maximum",
                self.columns * self.rows_max,
                schema.max_elements
            )));
        }
        if !(0.0..0.5).contains(&self.margin) || !(0.0..0.5).contains(&self.gutter) {
            return Err(Error::Config("margin and gutter must lie in [0, 0.5)".into()));
        }
        let col_width =
            (1.0 - 2.0 * self.margin - (self.columns as f64 - 1.0) * self.gutter) / self.columns as f64;
        let row_space = 1.0 - 2.0 * self.margin - (self.rows_max as f64 - 1.0) * self.gutter;
        if col_width <= 0.0 || row_space <= 0.05 * self.rows_max as f64 {
            return Err(Error::Config(
                "infeasible grid: margins and gutters leave no room for cells".into(),
            ));
        }
        Ok(())
    }
}

fn grid_layout(spec: &SyntheticGridSpec, schema: &LayoutSchema, rng: &mut impl Rng) -> Layout {
    let rows = rng.random_range(spec.rows_min..=spec.rows_max);
    let col_width =
        (1.0 - 2.0 * spec.margin - (spec.columns as f64 - 1.0) * spec.gutter) / spec.columns as f64;
    // Random row proportions rescaled to fill the vertical space exactly.
    let available = 1.0 - 2.0 * spec.margin - (rows as f64 - 1.0) * spec.gutter;
    let raw: Vec<f64> = (0..rows).map(|_| rng.random_range(0.5..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let heights: Vec<f64> = raw.iter().map(|u| available * u / total).collect();
    let mut tops = Vec::with_capacity(rows);
    let mut y = spec.margin;
    for h in &heights {
        tops.push(y);
        y += h + spec.gutter;
    }
    let mut elements = Vec::with_capacity(spec.columns * rows);
    for col in 0..spec.columns {
        let cx = spec.margin + col as f64 * (col_width + spec.gutter) + col_width / 2.0;
        for r in 0..rows {
            let cy = tops[r] + heights[r] / 2.0;
            elements.push(Element {
                label: rng.random_range(0..spec.n_classes),
                bbox: BBox { cx, cy, w: col_width, h: heights[r] },
            });
        }
    }
    Layout::new(spec.canvas, elements, schema).expect("grid fits the schema by validation")
}

fn real_boxes(layout: &Layout) -> Array2<f64> {
    let mut boxes = Array2::zeros((layout.elements().len(), 4));
    for (i, el) in layout.elements().iter().enumerate() {
        boxes[[i, 0]] = el.bbox.cx;
        boxes[[i, 1]] = el.bbox.cy;
        boxes[[i, 2]] = el.bbox.w;
        boxes[[i, 3]] = el.bbox.h;
    }
    boxes
}

/// Stream-domain tag for synthetic-corpus draws.
const SYNTH_STREAM_TAG: u64 = 0x5359_4E54;

/// Generates `count` grid layouts. Each layout is checked to have exactly
/// zero alignment and overlap loss — the construction guarantees it, and the
/// assertion turns any regression into a loud failure.
pub fn generate_synthetic(
    spec: &SyntheticGridSpec,
    count: usize,
    schema: &LayoutSchema,
) -> Result<Vec<Layout>> {
    spec.validate(schema)?;
    if count == 0 {
        return Err(Error::Config("synthetic corpus count must be positive".into()));
    }
    let mut layouts = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = derive_stream(spec.seed, SYNTH_STREAM_TAG, i as u64);
        let layout = grid_layout(spec, schema, &mut rng);
        let boxes = real_boxes(&layout);
        let alignment = local_alignment_loss(&boxes, layout.n_real());
        let overlap = overlap_loss(&boxes, layout.n_real());
        assert_eq!(alignment.value, 0.0, "grid construction must be exactly aligned");
        assert_eq!(overlap.value, 0.0, "grid construction must be overlap-free");
        layouts.push(layout);
    }
    Ok(layouts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> LayoutSchema {
        LayoutSchema::default()
    }

    fn spec_with(columns: usize, seed: u64) -> SyntheticGridSpec {
        SyntheticGridSpec { columns, seed, ..SyntheticGridSpec::default() }
    }

    #[test]
    fn two_column_grid_has_exactly_aligned_columns() {
        let spec = SyntheticGridSpec { rows_min: 3, rows_max: 3, ..spec_with(2, 7) };
        let layouts = generate_synthetic(&spec, 5, &schema()).unwrap();
        for layout in &layouts {
            assert_eq!(layout.n_real(), 6);
            let els = layout.real_elements();
            // First three share a column, last three the other.
            for group in [&els[0..3], &els[3..6]] {
                let left0 = group[0].bbox.cx - group[0].bbox.w / 2.0;
                for el in group {
                    let left = el.bbox.cx - el.bbox.w / 2.0;
                    assert_eq!(left.to_bits(), left0.to_bits(), "left edges bit-equal");
                }
            }
            // Rows line up across columns.
            for r in 0..3 {
                assert_eq!(els[r].bbox.cy, els[3 + r].bbox.cy);
                assert_eq!(els[r].bbox.h, els[3 + r].bbox.h);
            }
        }
    }

    #[test]
    fn generated_layouts_have_zero_losses_and_valid_geometry() {
        for columns in [1, 2] {
            let layouts = generate_synthetic(&spec_with(columns, 3), 50, &schema()).unwrap();
            assert_eq!(layouts.len(), 50);
            for layout in &layouts {
                layout.validate_clean(1e-9).unwrap();
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let fat_margin = SyntheticGridSpec { margin: 0.49, ..SyntheticGridSpec::default() };
        assert!(fat_margin.validate(&schema()).is_err());
        let bad_cols = SyntheticGridSpec { columns: 3, ..SyntheticGridSpec::default() };
        assert!(bad_cols.validate(&schema()).is_err());
        let too_many = SyntheticGridSpec { rows_min: 2, rows_max: 20, ..SyntheticGridSpec::default() };
        assert!(too_many.validate(&schema()).is_err());
        let bad_palette = SyntheticGridSpec { n_classes: 9, ..SyntheticGridSpec::default() };
        assert!(bad_palette.validate(&schema()).is_err());
    }

    #[test]
    fn generation_is_deterministic_per_seed_and_varies_across_seeds() {
        let a = generate_synthetic(&spec_with(2, 11), 20, &schema()).unwrap();
        let b = generate_synthetic(&spec_with(2, 11), 20, &schema()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.n_real(), y.n_real());
            for (ex, ey) in x.real_elements().iter().zip(y.real_elements()) {
                assert_eq!(ex.label, ey.label);
                assert_eq!(ex.bbox.cx.to_bits(), ey.bbox.cx.to_bits());
            }
        }
        let c = generate_synthetic(&spec_with(2, 12), 20, &schema()).unwrap();
        let differs = a
            .iter()
            .zip(&c)
            .any(|(x, y)| x.n_real() != y.n_real() || x.real_elements()[0].bbox != y.real_elements()[0].bbox);
        assert!(differs);
    }

    #[test]
    fn distinct_seeds_share_summary_statistics() {
        let a = generate_synthetic(&spec_with(2, 1), 300, &schema()).unwrap();
        let b = generate_synthetic(&spec_with(2, 2), 300, &schema()).unwrap();
        let mean_n = |ls: &[Layout]| {
            ls.iter().map(|l| l.n_real() as f64).sum::<f64>() / ls.len() as f64
        };
        let mean_h = |ls: &[Layout]| {
            let mut s = 0.0;
            let mut c = 0usize;
            for l in ls {
                for e in l.real_elements() {
                    s += e.bbox.h;
                    c += 1;
                }
            }
            s / c as f64
        };
        // Counts are 2 * U{2..4}: mean 6, sd ~1.63; with n=300 a 0.5 band is
        // well beyond 3 standard errors of the difference.
        assert!((mean_n(&a) - mean_n(&b)).abs() < 0.5);
        assert!((mean_h(&a) - mean_h(&b)).abs() < 0.02);
    }

    #[test]
    fn corpus_round_trip_is_bit_exact() {
        let layouts = generate_synthetic(&spec_with(2, 5), 25, &schema()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&path, &layouts).unwrap();
        let (back, report) = read_corpus(&path, &schema()).unwrap();
        assert_eq!(report.kept, 25);
        assert!(report.skipped.is_empty());
        assert_eq!(back.len(), layouts.len());
        for (x, y) in layouts.iter().zip(&back) {
            assert_eq!(x.canvas, y.canvas);
            assert_eq!(x.n_real(), y.n_real());
            for (ex, ey) in x.real_elements().iter().zip(y.real_elements()) {
                assert_eq!(ex.label, ey.label);
                assert_eq!(ex.bbox.cx.to_bits(), ey.bbox.cx.to_bits());
                assert_eq!(ex.bbox.cy.to_bits(), ey.bbox.cy.to_bits());
                assert_eq!(ex.bbox.w.to_bits(), ey.bbox.w.to_bits());
                assert_eq!(ex.bbox.h.to_bits(), ey.bbox.h.to_bits());
            }
        }
    }

    #[test]
    fn ingest_skips_bad_lines_with_reasons() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        let good = r#"{"canvas":[816,1056],"elements":[{"label":0,"box":[0.5,0.5,0.2,0.2]},{"label":1,"box":[0.5,0.8,0.2,0.1]}]}"#;
        let overlong_elements: Vec<String> = (0..26)
            .map(|i| format!(r#"{{"label":0,"box":[0.5,{},0.01,0.01]}}"#, 0.01 + i as f64 * 0.03))
            .collect();
        let overlong = format!(
            r#"{{"canvas":[816,1056],"elements":[{}]}}"#,
            overlong_elements.join(",")
        );
        let bad_label = r#"{"canvas":[816,1056],"elements":[{"label":7,"box":[0.5,0.5,0.2,0.2]}]}"#;
        let content = format!("{}\nnot json at all\n{}\n{}\n{}\n", good, good, overlong, bad_label);
        std::fs::write(&path, content).unwrap();
        let (layouts, report) = read_corpus(&path, &schema()).unwrap();
        assert_eq!(layouts.len(), 2);
        assert_eq!(report.kept, 2);
        assert_eq!(report.skipped.len(), 3);
        assert_eq!(report.skipped[0].0, 2);
        assert!(report.skipped[0].1.contains("malformed"));
        assert_eq!(report.skipped[1].0, 4);
        assert!(report.skipped[1].1.contains("26 elements"));
        assert_eq!(report.skipped[2].0, 5);
        assert!(report.skipped[2].1.contains("label 7"));
        assert_eq!(report.class_histogram[0], 2);
        assert_eq!(report.class_histogram[1], 2);
        assert_eq!(report.length_histogram[2], 2);
    }

    #[test]
    fn empty_and_all_invalid_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(read_corpus(&empty, &schema()).is_err());
        let junk = dir.path().join("junk.jsonl");
        std::fs::write(&junk, "{}\n{}\n").unwrap();
        assert!(read_corpus(&junk, &schema()).is_err());
    }
}
