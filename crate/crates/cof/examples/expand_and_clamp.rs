//! Box post-processing walkthrough: center-preserving expansion, the
//! shift-into-bounds clamp, and rasterization onto the patch grid.
//!
//! ```bash
//! cargo run --example expand_and_clamp
//! ```

use cof::geometry::{box_to_mask, clamp_box, expand_box, NormBox, PatchGrid};

fn show_mask_grid(mask: &cof::geometry::TokenMask) -> String {
    let grid = mask.grid();
    let mut out = String::new();
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            out.push(if mask.bit(r, c) { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

fn main() {
    let grid = PatchGrid::new(6, 6).unwrap();

    // A grounded box near the bottom-right corner.
    let grounded = NormBox::new(0.7, 0.65, 0.95, 0.9).unwrap();
    println!("grounded box : {:?}", grounded.corners());

    for alpha in [1.0, 1.3, 2.0] {
        let expanded = expand_box(&grounded, alpha).unwrap();
        let clamped = clamp_box(&expanded);
        let mask = box_to_mask(&clamped, &grid);
        println!();
        println!(
            "alpha = {alpha}: expanded [{:.4}, {:.4}, {:.4}, {:.4}]",
            expanded.x1, expanded.y1, expanded.x2, expanded.y2
        );
        println!(
            "            clamped  {:?} (shifted back inside, size preserved)",
            clamped.corners()
        );
        println!(
            "            mask covers {}/{} patches:",
            mask.cardinality(),
            grid.len()
        );
        print!("{}", show_mask_grid(&mask));
    }

    // Degenerate boxes still select the patch containing their center.
    let point = NormBox::new(0.52, 0.18, 0.52, 0.18).unwrap();
    let mask = box_to_mask(&point, &grid);
    println!();
    println!(
        "point box {:?} selects exactly {} patch:",
        point.corners(),
        mask.cardinality()
    );
    print!("{}", show_mask_grid(&mask));
}
