//! Alignment grids: rows are landmark phrases, columns are trace frames,
//! decoded runs are filled and each phrase's best frame is starred.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::pipeline::SilverRecord;

const CELL_PX: usize = 14;
const LABEL_PX: usize = 160;

fn check(record: &SilverRecord, frames: usize) -> Result<()> {
    for lm in &record.landmarks {
        if !(lm.run_start <= lm.frame_index && lm.frame_index <= lm.run_end && lm.run_end < frames)
        {
            return Err(Error::Invariant(format!(
                "landmark {} of `{}` does not fit a {frames}-frame trace",
                lm.order, record.instruction_id
            )));
        }
    }
    Ok(())
}

/// Plain-text grid: `#` for run cells, `*` for the best frame, `.` else.
pub fn render_alignment_text(record: &SilverRecord, frames: usize) -> Result<String> {
    check(record, frames)?;
    let width = record
        .landmarks
        .iter()
        .map(|l| l.text.chars().count())
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    writeln!(out, "{} ({frames} frames)", record.instruction_id).expect("writing to a string");
    for lm in &record.landmarks {
        let cells: String = (0..frames)
            .map(|j| {
                if j == lm.frame_index {
                    '*'
                } else if (lm.run_start..=lm.run_end).contains(&j) {
                    '#'
                } else {
                    '.'
                }
            })
            .collect();
        writeln!(out, "{:<width$} |{cells}|", lm.text).expect("writing to a string");
    }
    Ok(out)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SVG grid with the same layout as the text form.
pub fn render_alignment_svg(record: &SilverRecord, frames: usize) -> Result<String> {
    check(record, frames)?;
    let rows = record.landmarks.len();
    let w = LABEL_PX + frames * CELL_PX + 1;
    let h = (rows + 1) * CELL_PX + 1;
    let mut s = String::new();
    let mut line = |text: String| {
        s.push_str(&text);
        s.push('\n');
    };
    line(format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="monospace" font-size="10">"#
    ));
    line(format!("<title>{}</title>", escape(&record.instruction_id)));
    for j in 0..frames {
        let x = LABEL_PX + j * CELL_PX;
        line(format!(
            r#"<text x="{}" y="{}" text-anchor="middle">{j}</text>"#,
            x + CELL_PX / 2,
            CELL_PX - 3
        ));
    }
    for (i, lm) in record.landmarks.iter().enumerate() {
        let y = (i + 1) * CELL_PX;
        line(format!(
            r#"<text x="4" y="{}">{}</text>"#,
            y + CELL_PX - 3,
            escape(&lm.text)
        ));
        for j in 0..frames {
            let x = LABEL_PX + j * CELL_PX;
            let fill = if (lm.run_start..=lm.run_end).contains(&j) {
                "#4a7bd0"
            } else {
                "#ffffff"
            };
            line(format!(
                r##"<rect x="{x}" y="{y}" width="{CELL_PX}" height="{CELL_PX}" fill="{fill}" stroke="#999999"/>"##
            ));
            if j == lm.frame_index {
                line(format!(
                    r##"<text x="{}" y="{}" text-anchor="middle" fill="#ffffff">*</text>"##,
                    x + CELL_PX / 2,
                    y + CELL_PX - 3
                ));
            }
        }
    }
    line("</svg>".into());
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::SilverLandmark;

    fn lm(order: usize, text: &str, run: (usize, usize), best: usize) -> SilverLandmark {
        SilverLandmark {
            order,
            text: text.into(),
            frame_index: best,
            pano_id: "p".into(),
            heading_deg: 0.0,
            pitch_deg: 0.0,
            hfov_deg: 60.0,
            vfov_deg: 60.0,
            log_prob: -0.1,
            run_start: run.0,
            run_end: run.1,
            score: None,
        }
    }

    #[test]
    fn single_cell() {
        let rec = SilverRecord {
            instruction_id: "i".into(),
            num_frames: 1,
            landmarks: vec![lm(0, "sofa", (0, 0), 0)],
        };
        assert_eq!(
            render_alignment_text(&rec, 1).unwrap(),
            "i (1 frames)\nsofa |*|\n"
        );
        let bad = SilverRecord {
            landmarks: vec![lm(0, "sofa", (0, 2), 1)],
            ..rec
        };
        assert!(render_alignment_text(&bad, 2).is_err());
    }

    #[test]
    fn four_by_nine() {
        let rec = SilverRecord {
            instruction_id: "fig".into(),
            num_frames: 9,
            landmarks: vec![
                lm(0, "stairs", (0, 1), 1),
                lm(1, "table", (3, 3), 3),
                lm(2, "lamp", (4, 6), 5),
                lm(3, "door & <mat>", (8, 8), 8),
            ],
        };
        let text = render_alignment_text(&rec, 9).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert!(rows[0].ends_with("|#*.......|"));
        assert!(rows[2].ends_with("|....#*#..|"));
        let svg = render_alignment_svg(&rec, 9).unwrap();
        assert!(svg.contains("door &amp; &lt;mat&gt;"));
        assert_eq!(svg.matches("<rect").count(), 36);
    }
}
