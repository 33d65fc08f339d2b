use std::collections::HashMap;

use ndarray::{ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, ArrayViewMut3};
use rand::Rng;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Every learnable tensor of the model, addressed by a stable name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape of {name}");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
        });
        ParamId(id)
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, shape, data)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].data
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, f32> {
        ArrayView1::from(&self.params[id.0].data[..])
    }

    pub fn view2(&self, id: ParamId) -> ArrayView2<'_, f32> {
        let p = &self.params[id.0];
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.data).expect("2-d parameter")
    }

    pub fn view3(&self, id: ParamId) -> ArrayView3<'_, f32> {
        let p = &self.params[id.0];
        ArrayView3::from_shape((p.shape[0], p.shape[1], p.shape[2]), &p.data).expect("3-d parameter")
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.numel()]).collect())
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f32>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.0[id.0]
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f32> {
        ArrayViewMut1::from(&mut self.0[id.0][..])
    }

    pub fn view2_mut(&mut self, id: ParamId, shape: (usize, usize)) -> ArrayViewMut2<'_, f32> {
        ArrayViewMut2::from_shape(shape, &mut self.0[id.0]).expect("2-d gradient")
    }

    pub fn view3_mut(&mut self, id: ParamId, shape: (usize, usize, usize)) -> ArrayViewMut3<'_, f32> {
        ArrayViewMut3::from_shape(shape, &mut self.0[id.0]).expect("3-d gradient")
    }

    /// Element-wise accumulation in a fixed order.
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn zero(&mut self, id: ParamId) {
        self.0[id.0].iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}
