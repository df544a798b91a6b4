use std::fmt::Write;

use super::{BlockKind, Timeline};
use crate::model::StageCostSequence;

/// `stage,micro_batch,kind,start_us,end_us`, one row per block ordered by
/// stage and start time.
pub fn timeline_csv(tl: &Timeline) -> String {
    let mut out = String::from("stage,micro_batch,kind,start_us,end_us\n");
    for x in 0..tl.stages {
        for b in tl.stage_blocks(x) {
            let kind = match b.kind {
                BlockKind::Forward => "forward",
                BlockKind::Backward => "backward",
            };
            writeln!(out, "{},{},{},{},{}", b.stage, b.micro_batch, kind, b.start * 1e6, b.end * 1e6).unwrap();
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct SvgOptions {
    /// Microseconds represented by one horizontal pixel.
    pub us_per_px: f64,
    pub row_height: f64,
}

impl Default for SvgOptions {
    fn default() -> Self {
        Self { us_per_px: 1.0, row_height: 24.0 }
    }
}

const LABEL_W: f64 = 80.0;

/// Gantt chart with one row per stage, stage 0 at the top. Blocks carry one
/// of the classes `forward`, `backward`, `comm` or `allreduce`.
pub fn timeline_svg(tl: &Timeline, seq: &StageCostSequence, opts: SvgOptions) -> String {
    let px = |t: f64| t * 1e6 / opts.us_per_px;
    let end = (0..tl.stages)
        .map(|x| tl.backward(tl.micro_batches - 1, x).end + seq[x].allreduce_time)
        .fold(tl.makespan(), f64::max);
    let width = LABEL_W + px(end).ceil() + 10.0;
    let height = opts.row_height * tl.stages as f64 + 10.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    s.push_str(
        "<style>.forward{fill:#4a90d9}.backward{fill:#5cb85c}.comm{fill:#f0ad4e}.allreduce{fill:#d9534f}\
         rect{stroke:#222;stroke-width:0.5}text{font:10px sans-serif}</style>\n",
    );
    for x in 0..tl.stages {
        let y = 5.0 + x as f64 * opts.row_height;
        let comm = !seq[x].is_compute();
        let label = if comm { format!("comm {x}") } else { format!("stage {x}") };
        writeln!(s, r#"<text x="2" y="{}">{label}</text>"#, y + opts.row_height * 0.6).unwrap();
        for b in tl.stage_blocks(x) {
            let class = match (comm, b.kind) {
                (true, _) => "comm",
                (false, BlockKind::Forward) => "forward",
                (false, BlockKind::Backward) => "backward",
            };
            writeln!(
                s,
                r#"<rect class="{class}" x="{:.3}" y="{y}" width="{:.3}" height="{}"><title>{class} mb {} [{:.3}us, {:.3}us)</title></rect>"#,
                LABEL_W + px(b.start),
                px(b.end - b.start),
                opts.row_height - 4.0,
                b.micro_batch,
                b.start * 1e6,
                b.end * 1e6
            )
            .unwrap();
        }
        let ar = seq[x].allreduce_time;
        if ar > 0.0 {
            let t0 = tl.backward(tl.micro_batches - 1, x).end;
            writeln!(
                s,
                r#"<rect class="allreduce" x="{:.3}" y="{y}" width="{:.3}" height="{}"><title>allreduce {:.3}us</title></rect>"#,
                LABEL_W + px(t0),
                px(ar),
                opts.row_height - 4.0,
                ar * 1e6
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::dapple_schedule;

    #[test]
    fn csv_has_one_row_per_block() {
        let seq = StageCostSequence::from_compute(&[1e-6, 1e-6], &[2e-6, 2e-6]);
        let tl = dapple_schedule(&seq, 3, &[2, 1]).unwrap();
        let csv = timeline_csv(&tl);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "stage,micro_batch,kind,start_us,end_us");
        assert_eq!(lines.len(), 1 + 2 * 3 * 2);
        assert_eq!(lines[1], "0,0,forward,0,1");
    }

    #[test]
    fn svg_marks_all_block_classes() {
        let mut v = StageCostSequence::from_compute(&[1e-6, 1e-6], &[2e-6, 2e-6]).0;
        v[0].allreduce_time = 3e-6;
        v.insert(1, crate::model::StageCost::communication(0.5e-6, 10));
        let seq = StageCostSequence(v);
        let tl = dapple_schedule(&seq, 2, &[2, 2, 1]).unwrap();
        let svg = timeline_svg(&tl, &seq, SvgOptions { us_per_px: 0.1, row_height: 20.0 });
        assert!(svg.starts_with("<svg"));
        for class in ["forward", "backward", "comm", "allreduce"] {
            assert!(svg.contains(&format!(r#"class="{class}""#)), "missing {class}");
        }
        assert_eq!(svg.matches("<rect").count(), 2 * 2 * 3 + 1);
    }
}
