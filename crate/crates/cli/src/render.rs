use std::fmt::Write;

use scorefield::ballworld::{BallState, WorldConfig};

pub const PALETTE: [&str; 3] = ["#d62728", "#2ca02c", "#1f77b4"];
const SIZE: f64 = 400.0;
const MARGIN: f64 = 10.0;

/// Step indices drawn for a trajectory with `n_states` states: the first,
/// every `every`-th, and always the last.
pub fn frame_steps(n_states: usize, every: usize) -> Vec<usize> {
    if n_states == 0 {
        return Vec::new();
    }
    let last = n_states - 1;
    let mut steps: Vec<usize> = (0..=last).step_by(every.max(1)).collect();
    if steps.last() != Some(&last) {
        steps.push(last);
    }
    steps
}

/// One frame as SVG. Coordinates are printed with fixed precision so the
/// bytes depend only on the state.
pub fn svg(state: &BallState, world: &WorldConfig) -> String {
    let h = world.half_extent;
    let scale = SIZE / (2.0 * h);
    let px = |x: f64| MARGIN + (x + h) * scale;
    let py = |y: f64| MARGIN + (h - y) * scale;
    let full = SIZE + 2.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{full:.0}" height="{full:.0}" viewBox="0 0 {full:.0} {full:.0}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN:.0}" y="{MARGIN:.0}" width="{SIZE:.0}" height="{SIZE:.0}" fill="white" stroke="black" stroke-width="2"/>"#
    );
    for (p, &c) in state.positions.iter().zip(&state.categories) {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{:.3}" fill="{}"/>"#,
            px(p[0]),
            py(p[1]),
            world.ball_radius * scale,
            PALETTE[c % PALETTE.len()]
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_include_first_and_last() {
        assert_eq!(frame_steps(101, 25), vec![0, 25, 50, 75, 100]);
        assert_eq!(frame_steps(101, 30), vec![0, 30, 60, 90, 100]);
        assert_eq!(frame_steps(101, 500), vec![0, 100]);
        assert_eq!(frame_steps(1, 5), vec![0]);
    }

    #[test]
    fn one_circle_per_ball() {
        let world = WorldConfig::default();
        let s = BallState::new(vec![[0.0, 0.0], [0.1, 0.1], [-0.1, 0.2]], vec![0, 1, 2]).unwrap();
        let text = svg(&s, &world);
        assert_eq!(text.matches("<circle").count(), 3);
        for c in PALETTE {
            assert!(text.contains(c));
        }
    }
}
