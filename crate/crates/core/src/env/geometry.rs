use super::Vec2;

/// Axis-aligned wall segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn expanded(&self, r: f64) -> Self {
        Self::new(self.x0 - r, self.y0 - r, self.x1 + r, self.y1 + r)
    }

    /// Strict interior test.
    pub fn contains(&self, p: Vec2) -> bool {
        p[0] > self.x0 && p[0] < self.x1 && p[1] > self.y0 && p[1] < self.y1
    }
}

/// Moves a disc of radius `r` that travelled from `prev` to `pos` out of
/// every wall, to the nearest free point on a face it could have reached.
/// Returns the corrected centre and which axes were blocked.
pub fn resolve_walls(prev: Vec2, pos: Vec2, walls: &[Rect], r: f64) -> (Vec2, [bool; 2]) {
    let mut p = pos;
    let mut blocked = [false, false];
    for _ in 0..4 {
        let Some(w) = walls.iter().map(|w| w.expanded(r)).find(|w| w.contains(p)) else {
            break;
        };
        let mut best: Option<(f64, Vec2, usize)> = None;
        let mut offer = |cand: Vec2, axis: usize| {
            let d = (cand[axis] - p[axis]).abs();
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, cand, axis));
            }
        };
        if prev[0] < w.x1 {
            offer([w.x0, p[1]], 0);
        }
        if prev[0] > w.x0 {
            offer([w.x1, p[1]], 0);
        }
        if prev[1] < w.y1 {
            offer([p[0], w.y0], 1);
        }
        if prev[1] > w.y0 {
            offer([p[0], w.y1], 1);
        }
        let (_, cand, axis) = best.expect("at least one face is reachable");
        p = cand;
        blocked[axis] = true;
    }
    (p, blocked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pushed_back_to_entry_side() {
        let wall = [Rect::new(-0.05, -1.0, 0.05, 1.0)];
        let (p, b) = resolve_walls([-0.1, 0.0], [0.04, 0.0], &wall, 0.03);
        assert!((p[0] + 0.08).abs() < 1e-12);
        assert!(b[0]);
    }

    #[test]
    fn free_points_untouched() {
        let wall = [Rect::new(-0.05, -1.0, 0.05, 1.0)];
        assert_eq!(resolve_walls([0.5, 0.0], [0.4, 0.1], &wall, 0.03).0, [0.4, 0.1]);
    }
}
