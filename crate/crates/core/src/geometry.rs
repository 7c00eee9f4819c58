//! Obstacles and the safety constraint `h`, positive inside (unsafe).

use serde::{Deserialize, Serialize};

use crate::vehicle::VehicleState;

/// Axis-aligned box given by centre and half extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Rect {
    /// `1 - max(|dx|/hx, |dy|/hy)`: 1 at the centre, 0 on the edge.
    fn inside(&self, x: f64, y: f64) -> f64 {
        1.0 - ((x - self.cx).abs() / self.hx).max((y - self.cy).abs() / self.hy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Obstacle {
    Ellipse { x0: f64, y0: f64, a: f64, b: f64 },
    Circle { x0: f64, y0: f64, radius: f64 },
    TShape { bar: Rect, stem: Rect },
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid obstacle: {0}")]
pub struct ObstacleError(pub String);

impl Obstacle {
    pub fn validate(&self) -> Result<(), ObstacleError> {
        let ok = match *self {
            Obstacle::Ellipse { x0, y0, a, b } => x0.is_finite() && y0.is_finite() && a >= b && b > 0.0,
            Obstacle::Circle { x0, y0, radius } => x0.is_finite() && y0.is_finite() && radius > 0.0,
            Obstacle::TShape { bar, stem } => [bar, stem].iter().all(|r| r.hx > 0.0 && r.hy > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(ObstacleError(format!("{self:?}")))
        }
    }

    /// The canonical evaluation obstacle: 8 m by 5 m semi-axes, front edge
    /// 15 m ahead of a spawn at the origin.
    pub fn canonical_ellipse() -> Self {
        Obstacle::Ellipse { x0: 23.0, y0: 0.0, a: 8.0, b: 5.0 }
    }

    pub fn canonical_circle() -> Self {
        Obstacle::Circle { x0: 23.0, y0: 0.0, radius: 5.0 }
    }

    /// Bar facing the approaching vehicle with a stem trailing behind it.
    pub fn canonical_t_shape() -> Self {
        Obstacle::TShape {
            bar: Rect { cx: 17.0, cy: 0.0, hx: 2.0, hy: 6.0 },
            stem: Rect { cx: 24.0, cy: 0.0, hx: 5.0, hy: 1.5 },
        }
    }

    pub fn center(&self) -> (f64, f64) {
        match *self {
            Obstacle::Ellipse { x0, y0, .. } | Obstacle::Circle { x0, y0, .. } => (x0, y0),
            Obstacle::TShape { .. } => {
                let (lo, hi) = self.bounding_box();
                (0.5 * (lo.0 + hi.0), 0.5 * (lo.1 + hi.1))
            }
        }
    }

    /// Axis-aligned bounding box `((xmin, ymin), (xmax, ymax))`.
    pub fn bounding_box(&self) -> ((f64, f64), (f64, f64)) {
        match *self {
            Obstacle::Ellipse { x0, y0, a, b } => ((x0 - a, y0 - b), (x0 + a, y0 + b)),
            Obstacle::Circle { x0, y0, radius } => ((x0 - radius, y0 - radius), (x0 + radius, y0 + radius)),
            Obstacle::TShape { bar, stem } => {
                let lo = ((bar.cx - bar.hx).min(stem.cx - stem.hx), (bar.cy - bar.hy).min(stem.cy - stem.hy));
                let hi = ((bar.cx + bar.hx).max(stem.cx + stem.hx), (bar.cy + bar.hy).max(stem.cy + stem.hy));
                (lo, hi)
            }
        }
    }

    /// Ellipse `(x0, y0, a, b)` enclosing the obstacle, used by the driver's
    /// envelope and as obstacle features. Exact for ellipses and circles; for
    /// the T-shape it circumscribes the bounding box.
    pub fn envelope(&self) -> (f64, f64, f64, f64) {
        match *self {
            Obstacle::Ellipse { x0, y0, a, b } => (x0, y0, a, b),
            Obstacle::Circle { x0, y0, radius } => (x0, y0, radius, radius),
            Obstacle::TShape { .. } => {
                let (lo, hi) = self.bounding_box();
                let (cx, cy) = self.center();
                let s = std::f64::consts::SQRT_2;
                (cx, cy, s * 0.5 * (hi.0 - lo.0), s * 0.5 * (hi.1 - lo.1))
            }
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mv = |r: Rect| Rect { cx: r.cx + dx, cy: r.cy + dy, ..r };
        match *self {
            Obstacle::Ellipse { x0, y0, a, b } => Obstacle::Ellipse { x0: x0 + dx, y0: y0 + dy, a, b },
            Obstacle::Circle { x0, y0, radius } => Obstacle::Circle { x0: x0 + dx, y0: y0 + dy, radius },
            Obstacle::TShape { bar, stem } => Obstacle::TShape { bar: mv(bar), stem: mv(stem) },
        }
    }
}

/// Obstacle plus the constraint `h(X, Y)`: `h >= 0` is unsafe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyField {
    pub obstacle: Obstacle,
}

impl SafetyField {
    pub fn new(obstacle: Obstacle) -> Self {
        Self { obstacle }
    }

    /// Positive strictly inside, zero on the boundary, negative outside.
    /// The T-shape takes the exact maximum of the two box functions, which
    /// keeps the zero level set on the union's boundary.
    pub fn h(&self, x: f64, y: f64) -> f64 {
        match self.obstacle {
            Obstacle::Ellipse { x0, y0, a, b } => {
                let dx = x - x0;
                let dy = y - y0;
                1.0 - (dx * dx / (a * a) + dy * dy / (b * b))
            }
            Obstacle::Circle { x0, y0, radius } => {
                let dx = x - x0;
                let dy = y - y0;
                1.0 - (dx * dx + dy * dy) / (radius * radius)
            }
            Obstacle::TShape { bar, stem } => bar.inside(x, y).max(stem.inside(x, y)),
        }
    }

    pub fn h_state(&self, s: &VehicleState) -> f64 {
        self.h(s.x, s.y)
    }

    /// Lipschitz constant of `h` in `(X, Y)` over the box `[lo, hi]`.
    pub fn lipschitz_bound(&self, lo: (f64, f64), hi: (f64, f64)) -> f64 {
        let far = |c: f64, l: f64, h: f64| (l - c).abs().max((h - c).abs());
        match self.obstacle {
            Obstacle::Ellipse { x0, y0, a, b } => {
                2.0 * (far(x0, lo.0, hi.0) / (a * a)).hypot(far(y0, lo.1, hi.1) / (b * b))
            }
            Obstacle::Circle { x0, y0, radius } => {
                2.0 * far(x0, lo.0, hi.0).hypot(far(y0, lo.1, hi.1)) / (radius * radius)
            }
            Obstacle::TShape { bar, stem } => [bar, stem].iter().map(|r| 1.0 / r.hx.min(r.hy)).fold(0.0, f64::max),
        }
    }
}

/// A state is in CARS iff its reachability value is strictly positive.
pub fn cars_membership(v: f64) -> bool {
    v > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ellipse_values() {
        let f = SafetyField::new(Obstacle::Ellipse { x0: 3.0, y0: -1.0, a: 8.0, b: 5.0 });
        assert_eq!(f.h(3.0, -1.0), 1.0);
        assert_eq!(f.h(11.0, -1.0), 0.0);
        assert_eq!(f.h(3.0, 4.0), 0.0);
        assert_eq!(f.h(19.0, -1.0), -3.0);
    }

    #[test]
    fn t_shape_boundary_is_zero() {
        let f = SafetyField::new(Obstacle::canonical_t_shape());
        assert_eq!(f.h(15.0, 0.0), 0.0);
        assert_eq!(f.h(17.0, 6.0), 0.0);
        assert_eq!(f.h(29.0, 0.5), 0.0);
        assert!(f.h(17.0, 0.0) > 0.0);
        assert!(f.h(25.0, 3.0) < 0.0);
    }

    #[test]
    fn membership_is_strict() {
        assert!(!cars_membership(-5.0));
        assert!(cars_membership(0.01));
        assert!(!cars_membership(0.0));
    }

    fn shapes() -> Vec<Obstacle> {
        vec![Obstacle::canonical_ellipse(), Obstacle::canonical_circle(), Obstacle::canonical_t_shape()]
    }

    proptest! {
        #[test]
        fn h_is_lipschitz(x1 in -5.0..55.0f64, y1 in -15.0..15.0f64, x2 in -5.0..55.0f64, y2 in -15.0..15.0f64) {
            for o in shapes() {
                let f = SafetyField::new(o);
                let l = f.lipschitz_bound((-5.0, -15.0), (55.0, 15.0));
                let d = (x1 - x2).hypot(y1 - y2);
                prop_assert!((f.h(x1, y1) - f.h(x2, y2)).abs() <= l * d + 1e-12);
            }
        }

        #[test]
        fn sign_matches_geometry(x in -5.0..55.0f64, y in -15.0..15.0f64) {
            // Ellipse inside test written independently of h.
            let inside = ((x - 23.0) / 8.0).powi(2) + (y / 5.0).powi(2) < 1.0;
            let h = SafetyField::new(Obstacle::canonical_ellipse()).h(x, y);
            prop_assert_eq!(inside, h > 0.0);

            let in_rect = |cx: f64, cy: f64, hx: f64, hy: f64| (x - cx).abs() < hx && (y - cy).abs() < hy;
            let inside_t = in_rect(17.0, 0.0, 2.0, 6.0) || in_rect(24.0, 0.0, 5.0, 1.5);
            let h = SafetyField::new(Obstacle::canonical_t_shape()).h(x, y);
            prop_assert_eq!(inside_t, h > 0.0);
        }
    }
}
