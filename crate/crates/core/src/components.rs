//! 3D connected-component labeling and component-level mask edits.
//!
//! Labeling is a two-pass raster scan over a union-find forest: the first
//! pass links every foreground voxel to its already-visited neighbours, the
//! second assigns final ids in first-encounter order (x fastest), so the
//! result is fully determined by the mask.

use serde::{Deserialize, Serialize};

use crate::volume::{Geometry, Mask3D};

/// Voxel adjacency: faces (6), faces + edges (18), or faces + edges + corners (26).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub const ALL: [Connectivity; 3] = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix];

    /// Maximum number of non-zero coordinates in a neighbour offset.
    fn max_axes(self) -> usize {
        match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        }
    }

    /// All neighbour offsets for this adjacency.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if nonzero > 0 && nonzero <= self.max_axes() {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    /// Offsets of neighbours visited before the current voxel in scan order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        self.offsets()
            .into_iter()
            .filter(|&[dx, dy, dz]| (dz, dy, dx) < (0, 0, 0))
            .collect()
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl std::fmt::Display for Connectivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

impl std::str::FromStr for Connectivity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n: u8 = s.parse().map_err(|_| format!("invalid connectivity {s:?}"))?;
        Connectivity::try_from(n)
    }
}

/// Per-voxel component ids: 0 is background, components are 1..=count.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLabeling {
    pub geometry: Geometry,
    pub labels: Vec<u32>,
    pub count: usize,
    /// `sizes[id - 1]` is the voxel count of component `id`.
    pub sizes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn size_of(&self, id: u32) -> usize {
        self.sizes[id as usize - 1]
    }

    /// Mask of the given component ids.
    pub fn select(&self, keep: impl Fn(u32) -> bool) -> Mask3D {
        Mask3D::from_bools(self.geometry, self.labels.iter().map(|&l| l != 0 && keep(l)))
            .expect("labels match geometry")
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new() -> Self {
        DisjointSet { parent: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

pub fn label_components(mask: &Mask3D, connectivity: Connectivity) -> ComponentLabeling {
    let geometry = *mask.geometry();
    let [nx, ny, nz] = geometry.dims();
    let bits = mask.as_slice();
    let backward = connectivity.backward_offsets();
    const NONE: u32 = u32::MAX;
    let mut provisional = vec![NONE; bits.len()];
    let mut sets = DisjointSet::new();

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = geometry.index(x, y, z);
                if bits[i] == 0 {
                    continue;
                }
                let mut current = NONE;
                for &[dx, dy, dz] in &backward {
                    let (px, py, pz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if px < 0 || py < 0 || pz < 0 || px >= nx as isize || py >= ny as isize {
                        continue;
                    }
                    let j = geometry.index(px as usize, py as usize, pz as usize);
                    let l = provisional[j];
                    if l == NONE {
                        continue;
                    }
                    current = if current == NONE { l } else { sets.union(current, l) };
                }
                provisional[i] = if current == NONE { sets.make() } else { current };
            }
        }
    }

    let mut final_id = vec![0u32; sets.parent.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut labels = vec![0u32; bits.len()];
    for (i, &p) in provisional.iter().enumerate() {
        if p == NONE {
            continue;
        }
        let root = sets.find(p) as usize;
        if final_id[root] == 0 {
            sizes.push(0);
            final_id[root] = sizes.len() as u32;
        }
        let id = final_id[root];
        labels[i] = id;
        sizes[id as usize - 1] += 1;
    }

    ComponentLabeling {
        geometry,
        labels,
        count: sizes.len(),
        sizes,
    }
}

pub fn component_count(mask: &Mask3D, connectivity: Connectivity) -> usize {
    label_components(mask, connectivity).count
}

/// Keeps the `k` largest components; equal sizes prefer the smaller id.
pub fn keep_largest_k(mask: &Mask3D, connectivity: Connectivity, k: usize) -> Mask3D {
    let labeling = label_components(mask, connectivity);
    if labeling.count <= k {
        return mask.clone();
    }
    let mut order: Vec<u32> = (1..=labeling.count as u32).collect();
    order.sort_by(|&a, &b| labeling.size_of(b).cmp(&labeling.size_of(a)).then(a.cmp(&b)));
    let mut keep = vec![false; labeling.count + 1];
    for &id in order.iter().take(k) {
        keep[id as usize] = true;
    }
    labeling.select(|id| keep[id as usize])
}
