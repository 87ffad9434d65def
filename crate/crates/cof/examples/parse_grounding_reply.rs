//! Stage-1 prompt construction and reply parsing: the same box comes back
//! in three different coordinate conventions, plus a refusal that triggers
//! the fallback.
//!
//! ```bash
//! cargo run --example parse_grounding_reply
//! ```

use cof::grounding::{build_grounding_prompt, parse_bbox_response, DEFAULT_GROUNDING_TEMPLATE};

fn main() {
    let question = "What color is the small sign next to the door?";
    let bundle = build_grounding_prompt(question, DEFAULT_GROUNDING_TEMPLATE).unwrap();
    println!("stage-1 prompt:\n  {}\n", bundle.combined);

    let replies = [
        // Unit-normalized floats inside chatter.
        r#"Sure — the relevant region is {"bbox": [0.52, 0.31, 0.68, 0.47]}."#,
        // Pixel coordinates on a 640x480 image.
        r#"{"bounding_box": [333, 149, 435, 226]}"#,
        // 0-1000 normalized integers (infeasible as pixels on 640x480).
        r#"The answer area: [520, 310, 680, 470] in my coordinate system."#,
        // Swapped corners are reordered.
        r#"{"bbox": [0.68, 0.47, 0.52, 0.31]}"#,
        // No box at all: the pipeline falls back to the full image.
        "I cannot localize the answer in this image.",
    ];

    for raw in replies {
        let parsed = parse_bbox_response(raw, 640, 480).unwrap();
        println!("reply : {raw}");
        match parsed.parsed_box {
            Some(box_) => println!(
                "parsed: {:?} (convention: {:?})\n",
                box_.corners(),
                parsed.coord_convention.unwrap()
            ),
            None => println!(
                "parsed: none ({})\n",
                parsed.failure.expect("failure recorded")
            ),
        }
    }
}
