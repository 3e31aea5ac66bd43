use super::Splat;

/// Per-tile gaussian index lists, each sorted by (depth, index).
#[derive(Clone, Debug, PartialEq)]
pub struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn tile(&self, tx: usize, ty: usize) -> &[u32] {
        &self.lists[ty * self.tiles_x + tx]
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Pixel rectangle `(x0, y0, x1_exclusive, y1_exclusive)` covered by tile `t`.
    pub fn tile_pixels(
        &self,
        t: usize,
        width: usize,
        height: usize,
    ) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (
            x0,
            y0,
            (x0 + self.tile_size).min(width),
            (y0 + self.tile_size).min(height),
        )
    }
}

/// Assign every visible splat to each tile its footprint rectangle touches.
pub fn tile_bin(
    splats: &[Option<Splat>],
    width: usize,
    height: usize,
    tile_size: usize,
) -> TileBins {
    assert!(tile_size > 0, "tile size must be positive");
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut order: Vec<u32> = splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().map(|_| i as u32))
        .collect();
    // Depth then index: stable, thread-independent tie breaking.
    order.sort_by(|&a, &b| {
        let (da, db) = (
            splats[a as usize].as_ref().unwrap().depth,
            splats[b as usize].as_ref().unwrap().depth,
        );
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let r = splats[i as usize].as_ref().unwrap().rect;
        for ty in r.y0 / tile_size..=r.y1 / tile_size {
            for tx in r.x0 / tile_size..=r.x1 / tile_size {
                lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    TileBins {
        tile_size,
        tiles_x,
        tiles_y,
        lists,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::PixelRect;
    use std::collections::BTreeSet;

    fn splat(depth: f64, x0: usize, y0: usize, x1: usize, y1: usize) -> Option<Splat> {
        Some(Splat {
            mean: [0.0, 0.0],
            conic: [1.0, 0.0, 1.0],
            depth,
            opacity: 0.5,
            rect: PixelRect { x0, y0, x1, y1 },
        })
    }

    #[test]
    fn footprint_inside_one_tile() {
        let bins = tile_bin(&[splat(1.0, 18, 20, 25, 30)], 64, 64, 16);
        let hits: Vec<usize> = (0..bins.len())
            .filter(|&t| !bins.lists[t].is_empty())
            .collect();
        assert_eq!(hits, vec![bins.tiles_x + 1]);
    }

    #[test]
    fn footprint_spanning_border() {
        let bins = tile_bin(&[splat(1.0, 10, 2, 20, 5)], 64, 64, 16);
        assert_eq!(bins.tile(0, 0), &[0]);
        assert_eq!(bins.tile(1, 0), &[0]);
        assert_eq!(bins.lists.iter().filter(|l| !l.is_empty()).count(), 2);
    }

    #[test]
    fn depth_order_with_index_ties() {
        let splats = vec![
            splat(2.0, 0, 0, 3, 3),
            splat(1.0, 0, 0, 3, 3),
            None,
            splat(2.0, 0, 0, 3, 3),
        ];
        let bins = tile_bin(&splats, 16, 16, 16);
        assert_eq!(bins.tile(0, 0), &[1, 0, 3]);
    }

    #[test]
    fn partial_tiles_on_ragged_edges() {
        let bins = tile_bin(&[splat(1.0, 30, 30, 32, 32)], 33, 33, 16);
        assert_eq!((bins.tiles_x, bins.tiles_y), (3, 3));
        assert_eq!(bins.tile(2, 2), &[0]);
        assert_eq!(bins.tile_pixels(8, 33, 33), (32, 32, 33, 33));
    }

    #[test]
    fn union_of_tiles_is_visible_set() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let splats: Vec<Option<Splat>> = (0..200)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    return None;
                }
                let x0 = rng.gen_range(0..64);
                let y0 = rng.gen_range(0..64);
                splat(
                    rng.gen(),
                    x0,
                    y0,
                    rng.gen_range(x0..64),
                    rng.gen_range(y0..64),
                )
            })
            .collect();
        let bins = tile_bin(&splats, 64, 64, 16);
        let union: BTreeSet<u32> = bins.lists.iter().flatten().copied().collect();
        let visible: BTreeSet<u32> = (0..splats.len() as u32)
            .filter(|&i| splats[i as usize].is_some())
            .collect();
        assert_eq!(union, visible);
        for list in &bins.lists {
            for w in list.windows(2) {
                let (a, b) = (
                    splats[w[0] as usize].as_ref().unwrap(),
                    splats[w[1] as usize].as_ref().unwrap(),
                );
                assert!(a.depth < b.depth || (a.depth == b.depth && w[0] < w[1]));
            }
        }
    }
}
