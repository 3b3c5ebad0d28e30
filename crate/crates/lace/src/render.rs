//! Deterministic SVG rendering of layouts: one rectangle per real element,
//! class-keyed fill colors, canvas-sized view box. Output is a pure function
//! of the layout, so golden-file comparisons are byte-exact.

use crate::layout::Layout;

/// Fill colors cycled by class id.
const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc949", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac",
];

/// Stroke colors paired with the fills above.
const STROKES: [&str; 10] = [
    "#32506f", "#a85e17", "#9c3a3c", "#4d7d79", "#3a6e34", "#a3922c", "#7a5270", "#b26b72",
    "#6b5041", "#807a77",
];

pub fn class_color(label: usize) -> (&'static str, &'static str) {
    (PALETTE[label % PALETTE.len()], STROKES[label % STROKES.len()])
}

/// Renders the real elements as SVG. Coordinates are clamped to the unit
/// square before scaling to pixels, mirroring the decoding contract.
pub fn render_svg(layout: &Layout) -> String {
    let (w_px, h_px) = (layout.canvas.0 as f64, layout.canvas.1 as f64);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\" width=\"{}\" height=\"{}\">\n",
        layout.canvas.0, layout.canvas.1, layout.canvas.0, layout.canvas.1
    ));
    out.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>\n",
        layout.canvas.0, layout.canvas.1
    ));
    for el in layout.real_elements() {
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        let left = clamp(el.bbox.cx - el.bbox.w / 2.0);
        let right = clamp(el.bbox.cx + el.bbox.w / 2.0);
        let top = clamp(el.bbox.cy - el.bbox.h / 2.0);
        let bottom = clamp(el.bbox.cy + el.bbox.h / 2.0);
        let (fill, stroke) = class_color(el.label);
        out.push_str(&format!(
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" fill-opacity=\"0.6\" stroke=\"{}\" stroke-width=\"2\" data-label=\"{}\"/>\n",
            left * w_px,
            top * h_px,
            (right - left) * w_px,
            (bottom - top) * h_px,
            fill,
            stroke,
            el.label
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{BBox, Element, LayoutSchema};

    fn schema() -> LayoutSchema {
        LayoutSchema::default()
    }

    #[test]
    fn empty_layout_renders_a_valid_document() {
        let layout = Layout::new((816, 1056), vec![], &schema()).unwrap();
        let svg = render_svg(&layout);
        assert!(svg.starts_with("<svg "));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect").count(), 1, "background only");
    }

    #[test]
    fn fixture_matches_golden_output_byte_for_byte() {
        let layout = Layout::new(
            (100, 200),
            vec![
                Element { label: 0, bbox: BBox { cx: 0.5, cy: 0.25, w: 0.5, h: 0.25 } },
                Element { label: 1, bbox: BBox { cx: 0.5, cy: 0.75, w: 0.25, h: 0.125 } },
            ],
            &schema(),
        )
        .unwrap();
        let golden = "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 100 200\" width=\"100\" height=\"200\">\n  <rect x=\"0\" y=\"0\" width=\"100\" height=\"200\" fill=\"#ffffff\"/>\n  <rect x=\"25.00\" y=\"25.00\" width=\"50.00\" height=\"50.00\" fill=\"#4e79a7\" fill-opacity=\"0.6\" stroke=\"#32506f\" stroke-width=\"2\" data-label=\"0\"/>\n  <rect x=\"37.50\" y=\"137.50\" width=\"25.00\" height=\"25.00\" fill=\"#f28e2b\" fill-opacity=\"0.6\" stroke=\"#a85e17\" stroke-width=\"2\" data-label=\"1\"/>\n</svg>\n";
        assert_eq!(render_svg(&layout), golden);
        assert_eq!(render_svg(&layout), render_svg(&layout));
    }

    #[test]
    fn out_of_range_boxes_are_clamped_into_the_canvas() {
        let layout = Layout::new(
            (100, 100),
            vec![Element { label: 2, bbox: BBox { cx: 0.1, cy: 0.5, w: 0.5, h: 0.4 } }],
            &schema(),
        )
        .unwrap();
        let svg = render_svg(&layout);
        // Left edge would be -0.15; clamping pins it to 0 with width 35.
        assert!(svg.contains("x=\"0.00\""), "{}", svg);
        assert!(svg.contains("width=\"35.00\""), "{}", svg);
    }

    #[test]
    fn all_classes_get_distinct_colors_within_palette() {
        let mut seen = std::collections::HashSet::new();
        for label in 0..6 {
            seen.insert(class_color(label).0);
        }
        assert_eq!(seen.len(), 6);
    }
}
