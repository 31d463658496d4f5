use rand::Rng;
use serde::{Deserialize, Serialize};

/// Closed polygon in pixel units; the last vertex connects back to the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    /// Shoelace area, always non-negative.
    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let [x0, y0] = self.vertices[i];
            let [x1, y1] = self.vertices[(i + 1) % n];
            acc += x0 * y1 - x1 * y0;
        }
        acc / 2.0
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.vertices.len();
        let a = self.signed_area();
        let (mut cx, mut cy) = (0.0, 0.0);
        for i in 0..n {
            let [x0, y0] = self.vertices[i];
            let [x1, y1] = self.vertices[(i + 1) % n];
            let cross = x0 * y1 - x1 * y0;
            cx += (x0 + x1) * cross;
            cy += (y0 + y1) * cross;
        }
        [cx / (6.0 * a), cy / (6.0 * a)]
    }

    /// Largest vertex distance from the origin.
    pub fn radius(&self) -> f64 {
        self.vertices.iter().map(|[x, y]| x.hypot(*y)).fold(0.0, f64::max)
    }

    /// True when no two non-adjacent edges intersect and the area is positive.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 || self.area() <= 0.0 {
            return false;
        }
        for i in 0..n {
            let a0 = self.vertices[i];
            let a1 = self.vertices[(i + 1) % n];
            for j in (i + 1)..n {
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let b0 = self.vertices[j];
                let b1 = self.vertices[(j + 1) % n];
                if segments_intersect(a0, a1, b0, b1) {
                    return false;
                }
            }
        }
        true
    }

    /// Rotation by `angle` radians about the origin, then translation.
    pub fn placed(&self, angle: f64, offset: [f64; 2]) -> Polygon {
        let (s, c) = angle.sin_cos();
        Polygon {
            vertices: self
                .vertices
                .iter()
                .map(|&[x, y]| [c * x - s * y + offset[0], s * x + c * y + offset[1]])
                .collect(),
        }
    }

    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for d in 0..2 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        (lo, hi)
    }

    /// Even-odd rule point test.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let [xi, yi] = self.vertices[i];
            let [xj, yj] = self.vertices[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// Star-shaped polygon around the origin: sorted jittered angles and
    /// radii within `mean_radius * (1 ± radius_jitter)`.
    pub fn random_star<R: Rng + ?Sized>(
        rng: &mut R,
        vertex_count: usize,
        mean_radius: f64,
        radius_jitter: f64,
    ) -> Polygon {
        assert!(vertex_count >= 3);
        let step = std::f64::consts::TAU / vertex_count as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let vertices = (0..vertex_count)
            .map(|i| {
                let theta = phase + step * (i as f64 + rng.random_range(-0.35..0.35));
                let r = mean_radius * (1.0 + rng.random_range(-radius_jitter..=radius_jitter));
                [r * theta.cos(), r * theta.sin()]
            })
            .collect();
        Polygon { vertices }
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_intersect(a0: [f64; 2], a1: [f64; 2], b0: [f64; 2], b1: [f64; 2]) -> bool {
    let d1 = orient(b0, b1, a0);
    let d2 = orient(b0, b1, a1);
    let d3 = orient(a0, a1, b0);
    let d4 = orient(a0, a1, b1);
    ((d1 > 0.0) != (d2 > 0.0)) && ((d3 > 0.0) != (d4 > 0.0))
}
