use std::collections::HashMap;

use crate::error::{Error, Result};

/// A site on a batched grid. Ordering is row-major within each batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub batch: u32,
    pub row: u32,
    pub col: u32,
}

impl Coord {
    pub fn new(batch: usize, row: usize, col: usize) -> Self {
        Coord {
            batch: batch as u32,
            row: row as u32,
            col: col as u32,
        }
    }
}

/// Sorted, de-duplicated set of active sites on an `batch x height x width` grid.
#[derive(Clone, Debug)]
pub struct ActiveSet {
    batch: usize,
    height: usize,
    width: usize,
    coords: Vec<Coord>,
    index: HashMap<Coord, u32>,
}

impl PartialEq for ActiveSet {
    fn eq(&self, other: &Self) -> bool {
        self.same_sites(other)
    }
}

impl ActiveSet {
    /// Sorts `coords`; duplicates and out-of-bounds sites are rejected.
    pub fn new(batch: usize, height: usize, width: usize, mut coords: Vec<Coord>) -> Result<Self> {
        coords.sort_unstable();
        if let Some(w) = coords.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Sparse(format!("duplicate active site {:?}", w[0])));
        }
        if let Some(c) = coords
            .iter()
            .find(|c| c.batch as usize >= batch || c.row as usize >= height || c.col as usize >= width)
        {
            return Err(Error::Sparse(format!(
                "site {:?} outside the {}x{}x{} grid",
                c, batch, height, width
            )));
        }
        let index = coords.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        Ok(ActiveSet {
            batch,
            height,
            width,
            coords,
            index,
        })
    }

    pub fn full(batch: usize, height: usize, width: usize) -> Self {
        let coords = (0..batch)
            .flat_map(|b| (0..height).flat_map(move |r| (0..width).map(move |c| Coord::new(b, r, c))))
            .collect();
        Self::new(batch, height, width, coords).expect("full grid is valid")
    }

    pub fn empty(batch: usize, height: usize, width: usize) -> Self {
        Self::new(batch, height, width, Vec::new()).expect("empty set is valid")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn index_of(&self, c: Coord) -> Option<usize> {
        self.index.get(&c).map(|&i| i as usize)
    }

    /// Index of the site at signed grid position `(row, col)`, if active.
    pub fn lookup(&self, batch: usize, row: isize, col: isize) -> Option<usize> {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            return None;
        }
        self.index_of(Coord::new(batch, row as usize, col as usize))
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.index.contains_key(&c)
    }

    pub fn total_cells(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn active_fraction(&self) -> f64 {
        self.len() as f64 / self.total_cells() as f64
    }

    pub fn same_geometry(&self, other: &ActiveSet) -> bool {
        self.batch == other.batch && self.height == other.height && self.width == other.width
    }

    pub fn same_sites(&self, other: &ActiveSet) -> bool {
        std::ptr::eq(self, other) || (self.same_geometry(other) && self.coords == other.coords)
    }

    /// Flat `[batch, height, width]` occupancy map.
    pub fn occupancy(&self) -> Vec<bool> {
        let mut occ = vec![false; self.total_cells()];
        for c in &self.coords {
            occ[self.flat(*c)] = true;
        }
        occ
    }

    pub(crate) fn flat(&self, c: Coord) -> usize {
        (c.batch as usize * self.height + c.row as usize) * self.width + c.col as usize
    }
}
