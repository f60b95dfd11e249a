use nalgebra::Vector2;

use crate::image::Image;
use crate::scene::{BoundingBox, Camera};

fn cross(o: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    (a - o).perp(&(b - o))
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<Vector2<f64>>) -> Vec<Vector2<f64>> {
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Binary mask of the pixels whose centers fall inside the convex hull of the
/// projected box corners. If any corner is not in front of the near plane the
/// whole frame is marked.
pub fn project_bbox_mask(bbox: &BoundingBox, camera: &Camera) -> Image {
    let (w, h) = (camera.width(), camera.height());
    let mut pts = Vec::with_capacity(8);
    for c in bbox.corners() {
        let t = camera.world_to_camera(&c);
        if t.z <= camera.near {
            return Image::filled(w, h, 1, 1.0);
        }
        let (u, v) = camera.project_camera_point(&t);
        pts.push(Vector2::new(u, v));
    }
    let hull = convex_hull(pts);
    if hull.len() < 3 {
        return Image::new(w, h, 1);
    }
    Image::from_fn(w, h, 1, |x, y, _| {
        let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        let inside = (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0);
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Intrinsics;
    use nalgebra::Vector3;

    fn cam() -> Camera {
        let k = Intrinsics {
            fx: 32.0,
            fy: 32.0,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
        };
        Camera::look_at(k, Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::y(), 0.1, 50.0).unwrap()
    }

    #[test]
    fn centered_box_covers_expected_square() {
        // Front face at z = -1 (depth 3) spans ±0.5 → ±16/3 px, back face at depth 5 → ±3.2 px.
        let b = BoundingBox::new(Vector3::repeat(-0.5), Vector3::repeat(0.5)).unwrap();
        let m = project_bbox_mask(&b, &cam());
        let half = 16.0 / 3.0;
        for y in 0..32 {
            for x in 0..32 {
                let (px, py) = (x as f64 + 0.5 - 16.0, y as f64 + 0.5 - 16.0);
                let inside = px.abs() <= half && py.abs() <= half;
                assert_eq!(m.get(x, y, 0) == 1.0, inside, "pixel {x},{y}");
            }
        }
    }

    #[test]
    fn box_around_camera_fills_frame() {
        let b = BoundingBox::new(Vector3::repeat(-10.0), Vector3::repeat(10.0)).unwrap();
        assert!(project_bbox_mask(&b, &cam()).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn box_off_to_the_side_is_empty() {
        let b = BoundingBox::new(Vector3::new(20.0, -0.5, -0.5), Vector3::new(21.0, 0.5, 0.5)).unwrap();
        assert!(project_bbox_mask(&b, &cam()).data().iter().all(|&v| v == 0.0));
    }
}
