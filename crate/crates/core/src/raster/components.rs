use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{BinaryMask, BoundingBox};

/// Which neighbours count as connected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// N, S, E and W neighbours.
    Four,
    /// All eight neighbours.
    #[default]
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
        const EIGHT: [(isize, isize); 8] =
            [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

/// Labelled connected components. IDs are `1..=count` in raster-scan order
/// of each component's first pixel; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionSet {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
    /// `boxes[id - 1]`
    pub boxes: Vec<BoundingBox>,
    /// `areas[id - 1]`
    pub areas: Vec<usize>,
}

impl RegionSet {
    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Mask of a single component (`id` is 1-based).
    pub fn component_mask(&self, id: usize) -> BinaryMask {
        let id = id as u32;
        BinaryMask::from_fn(self.width, self.height, |x, y| self.label(x, y) == id)
    }
}

pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> RegionSet {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![0u32; w * h];
    let mut boxes = Vec::new();
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    let offsets = connectivity.offsets();

    for start in 0..w * h {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = boxes.len() as u32 + 1;
        let mut bbox = BoundingBox::point(start % w, start / w);
        let mut area = 0usize;
        labels[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            bbox.include(x, y);
            area += 1;
            for &(dx, dy) in offsets {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask.data()[q] != 0 && labels[q] == 0 {
                    labels[q] = id;
                    queue.push_back(q);
                }
            }
        }
        boxes.push(bbox);
        areas.push(area);
    }

    RegionSet { width: w, height: h, labels, count: boxes.len(), boxes, areas }
}
