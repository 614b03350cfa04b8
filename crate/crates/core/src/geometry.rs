//! Box algebra for hand annotations: quadrilaterals, axis-parallel and
//! rotated rectangles, IoU, unions, crop extension and the size filter.
//!
//! Coordinates are continuous pixels. Boxes are closed for area math.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn distance(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Axis-parallel box, serialised as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct AxisBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl AxisBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let all = [x_min, y_min, x_max, y_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite box coordinates {all:?}")));
        }
        if x_min > x_max || y_min > y_max {
            return Err(Error::Contract(format!(
                "box corners out of order: {all:?}"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn intersection_area(&self, other: &AxisBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection with `[0, width] × [0, height]`.
    pub fn clamp(&self, width: f64, height: f64) -> AxisBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        AxisBox {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Uniformly scales all coordinates about the origin.
    pub fn scaled(&self, s: f64) -> AxisBox {
        AxisBox {
            x_min: self.x_min * s,
            y_min: self.y_min * s,
            x_max: self.x_max * s,
            y_max: self.y_max * s,
        }
    }
}

impl TryFrom<[f64; 4]> for AxisBox {
    type Error = Error;

    fn try_from([a, b, c, d]: [f64; 4]) -> Result<Self> {
        AxisBox::new(a, b, c, d)
    }
}

impl From<AxisBox> for [f64; 4] {
    fn from(b: AxisBox) -> Self {
        b.to_array()
    }
}

/// Rectangle at an arbitrary orientation; `width` runs along `angle`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub center: Point,
    pub width: f64,
    pub height: f64,
    /// Radians in `[0, π)`.
    pub angle: f64,
}

impl RotatedBox {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.angle.sin_cos();
        let (hw, hh) = (0.5 * self.width, 0.5 * self.height);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(u, v)| {
            Point::new(
                self.center.x + u * c - v * s,
                self.center.y + u * s + v * c,
            )
        })
    }

    /// Axis-parallel crop region covering the rectangle.
    pub fn envelope(&self) -> AxisBox {
        bounds_of(&self.corners())
    }

    /// Whether `p` lies inside, with absolute slack `tol`.
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let d = p.sub(self.center);
        let u = d.x * c + d.y * s;
        let v = -d.x * s + d.y * c;
        u.abs() <= 0.5 * self.width + tol && v.abs() <= 0.5 * self.height + tol
    }
}

fn bounds_of(points: &[Point]) -> AxisBox {
    let mut b = AxisBox {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for p in points {
        b.x_min = b.x_min.min(p.x);
        b.y_min = b.y_min.min(p.y);
        b.x_max = b.x_max.max(p.x);
        b.y_max = b.y_max.max(p.y);
    }
    b
}

/// Four-vertex hand outline.
///
/// Construction normalises the vertex order to positive (counter-clockwise
/// in x-right/y-up terms) signed area; a self-intersecting outline is
/// reordered by angle around its centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 2]; 4]", into = "[[f64; 2]; 4]")]
pub struct Quadrilateral {
    vertices: [Point; 4],
}

impl Quadrilateral {
    pub fn new(vertices: [Point; 4]) -> Result<Self> {
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Contract("non-finite quadrilateral vertex".into()));
        }
        let mut v = vertices;
        if is_self_intersecting(&v) {
            log::warn!("self-intersecting quadrilateral {v:?}; reordering vertices");
            let c = Point::new(
                v.iter().map(|p| p.x).sum::<f64>() / 4.0,
                v.iter().map(|p| p.y).sum::<f64>() / 4.0,
            );
            v.sort_by(|a, b| {
                let ta = (a.y - c.y).atan2(a.x - c.x);
                let tb = (b.y - c.y).atan2(b.x - c.x);
                ta.total_cmp(&tb)
            });
        }
        if signed_area(&v) < 0.0 {
            v.reverse();
        }
        Ok(Self { vertices: v })
    }

    pub fn from_coords(coords: [[f64; 2]; 4]) -> Result<Self> {
        Self::new(coords.map(Point::from))
    }

    /// Axis-parallel rectangle as a quadrilateral.
    pub fn from_box(b: &AxisBox) -> Self {
        Self {
            vertices: [
                Point::new(b.x_min, b.y_min),
                Point::new(b.x_max, b.y_min),
                Point::new(b.x_max, b.y_max),
                Point::new(b.x_min, b.y_max),
            ],
        }
    }

    pub fn vertices(&self) -> &[Point; 4] {
        &self.vertices
    }

    /// Polygon area by the shoelace formula.
    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }

    pub fn clamp(&self, width: f64, height: f64) -> Self {
        Self {
            vertices: self
                .vertices
                .map(|p| Point::new(p.x.clamp(0.0, width), p.y.clamp(0.0, height))),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            vertices: self.vertices.map(|p| Point::new(p.x * s, p.y * s)),
        }
    }
}

impl TryFrom<[[f64; 2]; 4]> for Quadrilateral {
    type Error = Error;

    fn try_from(coords: [[f64; 2]; 4]) -> Result<Self> {
        Self::from_coords(coords)
    }
}

impl From<Quadrilateral> for [[f64; 2]; 4] {
    fn from(q: Quadrilateral) -> Self {
        q.vertices.map(Into::into)
    }
}

fn signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    0.5 * (0..n).map(|i| v[i].cross(v[(i + 1) % n])).sum::<f64>()
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = b.sub(a).cross(c.sub(a));
    let d2 = b.sub(a).cross(d.sub(a));
    let d3 = d.sub(c).cross(a.sub(c));
    let d4 = d.sub(c).cross(b.sub(c));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn is_self_intersecting(v: &[Point; 4]) -> bool {
    segments_cross(v[0], v[1], v[2], v[3]) || segments_cross(v[1], v[2], v[3], v[0])
}

/// Smallest axis-parallel box containing all four vertices.
pub fn envelope(q: &Quadrilateral) -> AxisBox {
    bounds_of(q.vertices())
}

/// Convex hull by monotone chain, counter-clockwise, without repeated or
/// collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                if b.sub(a).cross(p.sub(a)) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle. Some optimal rectangle has a side
/// parallel to a hull edge, so only hull-edge directions are tried.
pub fn min_area_rect(q: &Quadrilateral) -> RotatedBox {
    let hull = convex_hull(q.vertices());
    match hull.len() {
        0 => unreachable!("four vertices"),
        1 => RotatedBox {
            center: hull[0],
            width: 0.0,
            height: 0.0,
            angle: 0.0,
        },
        _ => {
            let mut best: Option<RotatedBox> = None;
            let edges = if hull.len() == 2 { 1 } else { hull.len() };
            for i in 0..edges {
                let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                let e = b.sub(a);
                let len = e.dot(e).sqrt();
                let u = Point::new(e.x / len, e.y / len);
                let v = Point::new(-u.y, u.x);
                let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) =
                    (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
                for p in &hull {
                    let d = p.sub(a);
                    let (pu, pv) = (d.dot(u), d.dot(v));
                    lo_u = lo_u.min(pu);
                    hi_u = hi_u.max(pu);
                    lo_v = lo_v.min(pv);
                    hi_v = hi_v.max(pv);
                }
                let (mu, mv) = (0.5 * (lo_u + hi_u), 0.5 * (lo_v + hi_v));
                let rect = RotatedBox {
                    center: Point::new(a.x + u.x * mu + v.x * mv, a.y + u.y * mu + v.y * mv),
                    width: hi_u - lo_u,
                    height: hi_v - lo_v,
                    angle: u.y.atan2(u.x).rem_euclid(std::f64::consts::PI),
                };
                if best.is_none_or(|b| rect.area() < b.area()) {
                    best = Some(rect);
                }
            }
            best.expect("at least one edge")
        }
    }
}

/// Scales each side about the centre by `factor`; a `(width, height)` bound
/// clamps the result to the image.
pub fn extend_box(b: &AxisBox, factor: f64, bounds: Option<(f64, f64)>) -> Result<AxisBox> {
    if !(factor > 0.0) {
        return Err(Error::Contract(format!("extension factor must be positive, got {factor}")));
    }
    let c = b.center();
    let (hw, hh) = (0.5 * b.width() * factor, 0.5 * b.height() * factor);
    let out = AxisBox {
        x_min: c.x - hw,
        y_min: c.y - hh,
        x_max: c.x + hw,
        y_max: c.y + hh,
    };
    Ok(match bounds {
        Some((w, h)) => out.clamp(w, h),
        None => out,
    })
}

/// Crop region for a quadrilateral hand: the envelope of its
/// minimum-area rectangle, optionally extended by `factor`.
pub fn quad_crop(q: &Quadrilateral, factor: Option<f64>, bounds: Option<(f64, f64)>) -> Result<AxisBox> {
    let env = min_area_rect(q).envelope();
    match factor {
        Some(f) => extend_box(&env, f, bounds),
        None => Ok(bounds.map_or(env, |(w, h)| env.clamp(w, h))),
    }
}

/// Intersection over union; `0` when the union is empty.
pub fn iou(a: &AxisBox, b: &AxisBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of the hand box covered by the object box.
pub fn overlap_fraction(hand: &AxisBox, obj: &AxisBox) -> Result<f64> {
    let area = hand.area();
    if !(area > 0.0) {
        return Err(Error::Contract(format!("zero-area hand box {:?}", hand.to_array())));
    }
    Ok(hand.intersection_area(obj) / area)
}

/// Tight box around a hand and an object.
pub fn union_box(hand: &AxisBox, obj: &AxisBox) -> AxisBox {
    AxisBox {
        x_min: hand.x_min.min(obj.x_min),
        y_min: hand.y_min.min(obj.y_min),
        x_max: hand.x_max.max(obj.x_max),
        y_max: hand.y_max.max(obj.y_max),
    }
}

/// Union region used when no object is detected: the hand box itself.
pub fn fallback_union(hand: &AxisBox) -> AxisBox {
    *hand
}

/// Union regions for a hand, one per object, or the fallback when there
/// are none.
pub fn union_regions(hand: &AxisBox, objects: &[AxisBox]) -> Vec<AxisBox> {
    if objects.is_empty() {
        vec![fallback_union(hand)]
    } else {
        objects.iter().map(|o| union_box(hand, o)).collect()
    }
}

/// Whether a hand is large enough to be annotated: the shorter side of its
/// envelope must exceed `min(height, width) / 30`.
pub fn size_filter(q: &Quadrilateral, height: f64, width: f64) -> bool {
    let env = envelope(q);
    env.width().min(env.height()) > height.min(width) / 30.0
}
