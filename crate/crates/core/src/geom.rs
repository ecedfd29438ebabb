//! Planar polyline geometry.

use crate::map::Point;

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Distance from `p` to segment `ab`, and the clamped parameter of the foot point.
pub fn segment_dist(p: Point, a: Point, b: Point) -> (f64, f64) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    (dist(p, [a[0] + t * dx, a[1] + t * dy]), t)
}

/// Distance from `p` to a polyline (a single point counts as a polyline).
pub fn polyline_dist(p: Point, line: &[Point]) -> f64 {
    match line {
        [] => f64::INFINITY,
        [a] => dist(p, *a),
        _ => line
            .windows(2)
            .map(|w| segment_dist(p, w[0], w[1]).0)
            .fold(f64::INFINITY, f64::min),
    }
}

pub fn length(line: &[Point]) -> f64 {
    line.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Points every `interval` of arc length, always including both endpoints.
pub fn resample(line: &[Point], interval: f64) -> Vec<Point> {
    assert!(interval > 0.0, "resample interval must be positive");
    if line.len() < 2 {
        return line.to_vec();
    }
    let total = length(line);
    if total == 0.0 {
        return vec![line[0]];
    }
    let steps = (total / interval).floor() as usize;
    let mut out = Vec::with_capacity(steps + 2);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..=steps {
        let s = k as f64 * interval;
        if s >= total {
            break;
        }
        loop {
            let l = dist(line[seg], line[seg + 1]);
            if s <= seg_start + l || seg + 2 == line.len() {
                let t = if l > 0.0 { ((s - seg_start) / l).clamp(0.0, 1.0) } else { 0.0 };
                let (a, b) = (line[seg], line[seg + 1]);
                out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                break;
            }
            seg_start += l;
            seg += 1;
        }
    }
    let last = *line.last().unwrap();
    if out.last().is_none_or(|p| dist(*p, last) > 1e-12) {
        out.push(last);
    }
    out
}
