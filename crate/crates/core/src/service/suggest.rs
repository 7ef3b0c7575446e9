//! Exact-color template matching over the Pixel-Taxi palette.

use serde::{Deserialize, Serialize};

use crate::env::taxi::{DESTINATION_BLACK, TAXI_GRAY};
use crate::env::PassengerColor;
use crate::feedback::BoundingBox;
use crate::state::RawFrame;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedBox {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    /// `taxi`, `destination` or `passenger-<color>`.
    pub entity: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxSuggestion {
    pub frame_index: usize,
    pub boxes: Vec<TaggedBox>,
}

fn color_name(c: PassengerColor) -> &'static str {
    match c {
        PassengerColor::Red => "red",
        PassengerColor::Green => "green",
        PassengerColor::Blue => "blue",
        PassengerColor::Yellow => "yellow",
        PassengerColor::Magenta => "magenta",
        PassengerColor::Cyan => "cyan",
    }
}

/// Cell-aligned boxes for every palette entity found in `frame`. A passenger
/// color inside the taxi cell is the carried passenger and is not tagged
/// separately; colors outside the palette are ignored.
pub fn suggest_boxes(frame: &RawFrame, cell_px: usize) -> Vec<TaggedBox> {
    if cell_px == 0 {
        return Vec::new();
    }
    let (cols, rows) = (frame.width() / cell_px, frame.height() / cell_px);
    let mut out = Vec::new();
    for cy in 0..rows {
        for cx in 0..cols {
            let mut taxi = false;
            let mut dest = false;
            let mut passengers: Vec<PassengerColor> = Vec::new();
            for y in cy * cell_px..(cy + 1) * cell_px {
                for x in cx * cell_px..(cx + 1) * cell_px {
                    let rgb = frame.get(x, y);
                    if rgb == TAXI_GRAY {
                        taxi = true;
                    } else if rgb == DESTINATION_BLACK {
                        dest = true;
                    } else if let Some(c) = PassengerColor::from_rgb(rgb) {
                        if !passengers.contains(&c) {
                            passengers.push(c);
                        }
                    }
                }
            }
            let bbox = BoundingBox {
                x: (cx * cell_px) as i32,
                y: (cy * cell_px) as i32,
                w: cell_px as i32,
                h: cell_px as i32,
            };
            let mut tag = |entity: String| out.push(TaggedBox { bbox, entity });
            if taxi {
                tag("taxi".into());
            }
            if dest {
                tag("destination".into());
            }
            if !taxi {
                for c in passengers {
                    tag(format!("passenger-{}", color_name(c)));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::taxi::{render, reset};
    use crate::env::{Cell, TaxiConfig};
    use std::collections::BTreeSet;

    #[test]
    fn taxi_box_coordinates() {
        let cfg = TaxiConfig::default();
        let (mut s, _) = reset(&cfg, 0).unwrap();
        let target = Cell::new(2, 3);
        if let Some(p) = s.passenger_at(target) {
            s.passengers[p].cell = None;
        }
        if s.destination == target {
            s.destination = Cell::new(6, 6);
        }
        s.taxi = target;
        let boxes = suggest_boxes(&render(&s), cfg.cell_px);
        let taxi: Vec<_> = boxes.iter().filter(|b| b.entity == "taxi").collect();
        assert_eq!(taxi.len(), 1);
        assert_eq!(taxi[0].bbox, BoundingBox { x: 24, y: 36, w: 12, h: 12 });
    }

    #[test]
    fn empty_frame_has_no_suggestions() {
        let white = RawFrame::filled(84, 84, [255, 255, 255]).unwrap();
        assert!(suggest_boxes(&white, 12).is_empty());
        let odd = RawFrame::filled(84, 84, [10, 20, 30]).unwrap();
        assert!(suggest_boxes(&odd, 12).is_empty());
    }

    #[test]
    fn suggestions_match_ground_truth_cells() {
        let cfg = TaxiConfig::default();
        let px = cfg.cell_px as i32;
        for seed in 0..300 {
            let (s, frame) = reset(&cfg, seed).unwrap();
            let boxes = suggest_boxes(&frame, cfg.cell_px);
            let mut expected = BTreeSet::new();
            expected.insert(("taxi".to_string(), s.taxi));
            expected.insert(("destination".to_string(), s.destination));
            for p in &s.passengers {
                let c = p.cell.unwrap();
                expected.insert((format!("passenger-{}", color_name(p.color)), c));
            }
            let got: BTreeSet<(String, Cell)> = boxes
                .iter()
                .map(|b| (b.entity.clone(), Cell::new((b.bbox.x / px) as usize, (b.bbox.y / px) as usize)))
                .collect();
            assert_eq!(got, expected, "seed {seed}");
            // distinct entities at reset occupy distinct cells, so boxes never overlap
            let cells: BTreeSet<(i32, i32)> = boxes.iter().map(|b| (b.bbox.x, b.bbox.y)).collect();
            assert_eq!(cells.len(), boxes.len());
            assert!(boxes.iter().all(|b| b.bbox.validate().is_ok()));
        }
    }
}
