//! Scribble synthesis from dense masks: a skeleton walk inside the largest
//! foreground component and a wandering stroke in the far background.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::labels::{LabelMap, ScribbleMask, BACKGROUND, FOREGROUND, UNLABELED};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScribbleConfig {
    /// Upper bound on the labeled pixel fraction of one image.
    pub max_fraction: f64,
    /// Minimum Euclidean distance (px) from background strokes to foreground.
    pub bg_margin: f64,
}

impl Default for ScribbleConfig {
    fn default() -> Self {
        Self {
            max_fraction: 0.05,
            bg_margin: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scribbles {
    pub mask: ScribbleMask,
    /// Set when the foreground was empty and no foreground stroke exists.
    pub fg_omitted: bool,
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

fn step(h: usize, w: usize, i: usize, d: (isize, isize)) -> Option<usize> {
    let (y, x) = ((i / w) as isize + d.0, (i % w) as isize + d.1);
    (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
}

/// Largest 8-connected component of `fg`, ties to the first found.
pub fn largest_component(fg: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![0usize; fg.len()];
    let mut best = (0usize, 0usize);
    let mut next = 0;
    for start in 0..fg.len() {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        label[start] = next;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for d in NEIGHBORS {
                if let Some(j) = step(h, w, i, d) {
                    if fg[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

/// 4-connected distance from each region pixel to the nearest non-region
/// pixel or the image border (boundary pixels get 1, others 0).
pub fn depth_map(region: &[bool], h: usize, w: usize) -> Vec<u32> {
    let mut depth = vec![0u32; region.len()];
    let mut queue = VecDeque::new();
    for i in 0..region.len() {
        if !region[i] {
            continue;
        }
        let (y, x) = (i / w, i % w);
        let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
        let touches = [(-1, 0), (1, 0), (0, -1), (0, 1)]
            .iter()
            .any(|&d| step(h, w, i, d).is_some_and(|j| !region[j]));
        if edge || touches {
            depth[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for d in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            if let Some(j) = step(h, w, i, d) {
                if region[j] && depth[j] == 0 {
                    depth[j] = depth[i] + 1;
                    queue.push_back(j);
                }
            }
        }
    }
    depth
}

/// Zhang–Suen thinning to a one-pixel-wide 8-connected skeleton.
pub fn skeletonize(region: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut img = region.to_vec();
    let at = |img: &[bool], y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && img[y as usize * w + x as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !img[y as usize * w + x as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let p: Vec<bool> = NEIGHBORS.iter().map(|&(dy, dx)| at(&img, y + dy, x + dx)).collect();
                    let b = p.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&k| !p[k] && p[(k + 1) % 8]).count();
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let cond = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                img[i] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

/// Walk over `allowed` pixels continuing `path`, never revisiting, up to `limit`
/// pixels. With `persistence` > 0 the walk prefers its current heading.
fn walk<R: Rng>(
    allowed: &[bool],
    h: usize,
    w: usize,
    mut path: Vec<usize>,
    limit: usize,
    persistence: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut visited = vec![false; allowed.len()];
    for &i in &path {
        visited[i] = true;
    }
    let mut heading = rng.gen_range(0..8);
    let mut cur = *path.last().expect("walk needs a start");
    while path.len() < limit {
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(rng);
        if rng.gen_bool(persistence) {
            order.retain(|&k| k != heading);
            order.insert(0, heading);
        }
        let next = order.into_iter().find_map(|k| {
            step(h, w, cur, NEIGHBORS[k])
                .filter(|&j| allowed[j] && !visited[j])
                .map(|j| (k, j))
        });
        match next {
            Some((k, j)) => {
                visited[j] = true;
                path.push(j);
                heading = k;
                cur = j;
            }
            None => break,
        }
    }
    path
}

/// Scribbles for a 1×H×W binary mask. Labeled pixels always agree with the
/// mask; everything else is [`UNLABELED`].
pub fn generate_scribbles<R: Rng>(mask: &LabelMap, config: &ScribbleConfig, rng: &mut R) -> Scribbles {
    let (n, h, w) = mask.dims();
    assert_eq!(n, 1, "scribbles are generated per image");
    let fg: Vec<bool> = mask.data().iter().map(|&v| v == FOREGROUND).collect();
    let budget = ((config.max_fraction * (h * w) as f64).floor() as usize).max(2);
    let mut out = vec![UNLABELED; h * w];
    let mut used = 0;

    let fg_omitted = !fg.iter().any(|&v| v);
    if !fg_omitted {
        let region = largest_component(&fg, h, w);
        let depth = depth_map(&region, h, w);
        let mut skeleton = skeletonize(&region, h, w);
        if !skeleton.iter().any(|&v| v) {
            // Thinning can erase some even-width shapes; keep the deepest pixel.
            let deepest = (0..h * w)
                .max_by_key(|&i| (depth[i], std::cmp::Reverse(i)))
                .expect("nonempty");
            skeleton[deepest] = true;
        }
        let nodes: Vec<usize> = (0..h * w).filter(|&i| skeleton[i]).collect();
        // Prefer starting at a skeleton end so the stroke runs along the shape.
        let ends: Vec<usize> = nodes
            .iter()
            .copied()
            .filter(|&i| {
                NEIGHBORS
                    .iter()
                    .filter(|&&d| step(h, w, i, d).is_some_and(|j| skeleton[j]))
                    .count()
                    <= 1
            })
            .collect();
        let pool = if ends.is_empty() { &nodes } else { &ends };
        let start = *pool.choose(rng).expect("nonempty skeleton");
        let area = region.iter().filter(|&&v| v).count();
        let target = (area / 4).clamp(1, budget / 2);
        let path = walk(&skeleton, h, w, vec![start], target, 0.0, rng);
        // Short skeletons (compact blobs) are extended through the interior.
        let interior: Vec<bool> = (0..h * w).map(|i| skeleton[i] || depth[i] >= 2).collect();
        let path = walk(&interior, h, w, path, target, 0.8, rng);
        for i in path {
            out[i] = FOREGROUND;
            used += 1;
        }
    }

    let margin2 = config.bg_margin * config.bg_margin;
    let reach = config.bg_margin.ceil() as isize;
    let far: Vec<bool> = (0..h * w)
        .map(|i| {
            !fg[i]
                && !(-reach..=reach).any(|dy| {
                    (-reach..=reach).any(|dx| {
                        ((dy * dy + dx * dx) as f64) < margin2 && step(h, w, i, (dy, dx)).is_some_and(|j| fg[j])
                    })
                })
        })
        .collect();
    let candidates: Vec<usize> = (0..h * w).filter(|&i| far[i]).collect();
    if let Some(&start) = candidates.choose(rng) {
        let room = budget - used;
        let target = rng.gen_range(room.div_ceil(2).max(1)..=room.max(1));
        for i in walk(&far, h, w, vec![start], target, 0.7, rng) {
            out[i] = BACKGROUND;
        }
    }
    Scribbles {
        mask: LabelMap::new(1, h, w, out).expect("dims match"),
        fg_omitted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skeleton_of_bar_is_thin() {
        let (h, w) = (7, 15);
        let region: Vec<bool> = (0..h * w)
            .map(|i| (2..5).contains(&(i / w)) && (2..13).contains(&(i % w)))
            .collect();
        let sk = skeletonize(&region, h, w);
        let count = sk.iter().filter(|&&v| v).count();
        assert!(count > 3 && count < 15, "{count}");
        assert!((0..h * w).all(|i| !sk[i] || region[i]));
    }

    #[test]
    fn largest_component_picks_bigger() {
        let (h, w) = (5, 10);
        let fg: Vec<bool> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                (y < 2 && x < 2) || (y >= 2 && x >= 5)
            })
            .collect();
        let big = largest_component(&fg, h, w);
        assert_eq!(big.iter().filter(|&&v| v).count(), 15);
    }
}
