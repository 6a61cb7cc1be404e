use crate::error::{Error, Result};
use crate::volume::Mask;

/// Neighbor offsets for 6-, 18- or 26-connectivity.
pub fn neighbor_offsets(connectivity: usize) -> Result<Vec<[isize; 3]>> {
    let max_l1 = match connectivity {
        6 => 1,
        18 => 2,
        26 => 3,
        other => {
            return Err(Error::invalid(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            )))
        }
    };
    let mut out = Vec::new();
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let l1 = dz.abs() + dy.abs() + dx.abs();
                if l1 > 0 && l1 <= max_l1 {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    Ok(out)
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        parent[i as usize] = parent[parent[i as usize] as usize];
        i = parent[i as usize];
    }
    i
}

/// Two-pass union-find labeling.
///
/// Returns per-voxel labels (0 = background) and the component count.
/// Labels run from 1 in scan order of each component's first voxel.
pub fn connected_components(mask: &Mask, connectivity: usize) -> Result<(Vec<u32>, usize)> {
    // Only neighbors already visited in scan order.
    let back: Vec<[isize; 3]> = neighbor_offsets(connectivity)?
        .into_iter()
        .filter(|o| *o < [0, 0, 0])
        .collect();
    let [d, h, w] = mask.dims();
    let mut provisional = vec![0u32; mask.len()];
    let mut parent: Vec<u32> = vec![0];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = mask.index(z, y, x);
                if mask.data()[i] == 0 {
                    continue;
                }
                let mut label = 0u32;
                for o in &back {
                    let (nz, ny, nx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    if nz < 0 || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let n = provisional[mask.index(nz as usize, ny as usize, nx as usize)];
                    if n == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = find(&mut parent, n);
                    } else {
                        let (a, b) = (find(&mut parent, label), find(&mut parent, n));
                        if a != b {
                            let (lo, hi) = (a.min(b), a.max(b));
                            parent[hi as usize] = lo;
                            label = lo;
                        }
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut next = 0u32;
    for p in provisional.iter_mut() {
        if *p == 0 {
            continue;
        }
        let root = find(&mut parent, *p) as usize;
        if remap[root] == 0 {
            next += 1;
            remap[root] = next;
        }
        *p = remap[root];
    }
    Ok((provisional, next as usize))
}
