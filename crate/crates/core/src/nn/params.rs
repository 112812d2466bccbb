use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// Index of a parameter group inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Flat, named parameter storage. Gradients use the same layout, so a
/// `ParamSet` doubles as a gradient accumulator via [`ParamSet::zeros_like`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    groups: Vec<ParamGroup>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> GroupId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: shape does not match data"
        );
        assert!(
            self.find(&name).is_none(),
            "parameter {name} registered twice"
        );
        self.groups.push(ParamGroup { name, shape, data });
        GroupId(self.groups.len() - 1)
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    shape: g.shape.clone(),
                    data: vec![0.0; g.data.len()],
                })
                .collect(),
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<GroupId> {
        self.groups.iter().position(|g| g.name == name).map(GroupId)
    }

    pub fn data(&self, id: GroupId) -> &[f64] {
        &self.groups[id.0].data
    }

    pub fn data_mut(&mut self, id: GroupId) -> &mut [f64] {
        &mut self.groups[id.0].data
    }

    pub fn matrix(&self, id: GroupId) -> ArrayView2<'_, f64> {
        let g = &self.groups[id.0];
        let (rows, cols) = match g.shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            other => panic!("{} is not a matrix: {other:?}", g.name),
        };
        ArrayView2::from_shape((rows, cols), &g.data).expect("contiguous group")
    }

    pub fn matrix_mut(&mut self, id: GroupId) -> ArrayViewMut2<'_, f64> {
        let g = &mut self.groups[id.0];
        let (rows, cols) = match g.shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            other => panic!("{} is not a matrix: {other:?}", g.name),
        };
        ArrayViewMut2::from_shape((rows, cols), &mut g.data).expect("contiguous group")
    }

    pub fn vector(&self, id: GroupId) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.groups[id.0].data[..])
    }

    /// Total scalar count across groups.
    pub fn len(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (gi, g) in self.groups.iter().enumerate() {
            if flat < g.data.len() {
                return (gi, flat);
            }
            flat -= g.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn get_flat(&self, flat: usize) -> f64 {
        let (g, i) = self.locate(flat);
        self.groups[g].data[i]
    }

    pub fn set_flat(&mut self, flat: usize, v: f64) {
        let (g, i) = self.locate(flat);
        self.groups[g].data[i] = v;
    }

    pub fn flat_name(&self, flat: usize) -> String {
        let (g, i) = self.locate(flat);
        format!("{}[{i}]", self.groups[g].name)
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        assert_eq!(self.groups.len(), other.groups.len());
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.groups {
            g.data.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn fill_zero(&mut self) {
        for g in &mut self.groups {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.groups.iter().flat_map(|g| g.data.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    /// Copy values group-by-group from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), String> {
        for g in &mut self.groups {
            let src = other
                .groups
                .iter()
                .find(|o| o.name == g.name)
                .ok_or_else(|| format!("missing parameter group {}", g.name))?;
            if src.shape != g.shape {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    g.name, src.shape, g.shape
                ));
            }
            g.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}
