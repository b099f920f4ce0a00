use countlab::geometry::BBox;
use rand::Rng;

pub const RASTER: usize = 1000;

/// Boxes on a 1/200 grid, so every raster pixel centre lies strictly inside
/// or outside each box and the raster is exact up to float error.
pub fn grid_box(rng: &mut impl Rng) -> BBox {
    let x1 = rng.random_range(0..180);
    let y1 = rng.random_range(0..180);
    let w = rng.random_range(4..=(200 - x1).min(80));
    let h = rng.random_range(4..=(200 - y1).min(80));
    let s = |v: i32| v as f64 / 200.0;
    BBox::new(s(x1), s(y1), s(x1 + w), s(y1 + h))
}

pub fn inside(b: &BBox, x: f64, y: f64) -> bool {
    b.x1 <= x && x < b.x2 && b.y1 <= y && y < b.y2
}

/// GroundP by rasterizing the canvas: each proposal's precision is the share
/// of its pixels whose centre falls in some ground-truth box.
pub fn raster_ground_p(instances: &[(Vec<BBox>, Vec<f64>, Vec<BBox>)]) -> f64 {
    let px = 1.0 / RASTER as f64;
    let (mut s, mut c) = (0.0, 0.0);
    for (proposals, scores, gts) in instances {
        for (b, &score) in proposals.iter().zip(scores) {
            let (i0, i1) = ((b.x1 * RASTER as f64) as usize, (b.x2 * RASTER as f64).ceil() as usize);
            let (j0, j1) = ((b.y1 * RASTER as f64) as usize, (b.y2 * RASTER as f64).ceil() as usize);
            let (mut hit, mut all) = (0usize, 0usize);
            for i in i0..i1.min(RASTER) {
                let x = (i as f64 + 0.5) * px;
                for j in j0..j1.min(RASTER) {
                    let y = (j as f64 + 0.5) * px;
                    if inside(b, x, y) {
                        all += 1;
                        hit += usize::from(gts.iter().any(|g| inside(g, x, y)));
                    }
                }
            }
            s += score * hit as f64 / all as f64;
            c += score;
        }
    }
    s / c
}

pub type GroundingCase = Vec<(Vec<BBox>, Vec<f64>, Vec<BBox>)>;

/// One to three questions, each with 1-3 ground-truth boxes and 1-5 scored proposals.
pub fn random_case(rng: &mut impl Rng) -> GroundingCase {
    (0..rng.random_range(1..4))
        .map(|_| {
            let gts: Vec<BBox> = (0..rng.random_range(1..4)).map(|_| grid_box(rng)).collect();
            let n = rng.random_range(1..6);
            let proposals: Vec<BBox> = (0..n).map(|_| grid_box(rng)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            (proposals, scores, gts)
        })
        .collect()
}
