//! Small residual CNN producing C2..C5 at strides 4, 8, 16 and 32.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;
use crate::types::{pyramid_channels, FeatureMap, FeaturePyramid, PYRAMID_STRIDES};

/// Scale applied to the last convolution of each residual block at init, so
/// the un-normalized network starts close to its downsampling path.
const RESIDUAL_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    res_a: Conv2d,
    res_b: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub width: usize,
    stem: Conv2d,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(name: &str, width: usize) -> Self {
        let stem = Conv2d::strided(format!("{name}.stem"), 3, width, 3, 2);
        let mut prev = width;
        let stages = pyramid_channels(width)
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stage = Stage {
                    down: Conv2d::strided(format!("{name}.stage{i}.down"), prev, c, 3, 2),
                    res_a: Conv2d::same(format!("{name}.stage{i}.res_a"), c, c, 3),
                    res_b: Conv2d::same(format!("{name}.stage{i}.res_b"), c, c, 3),
                };
                prev = c;
                stage
            })
            .collect();
        Self {
            width,
            stem,
            stages,
        }
    }

    pub fn channels(&self) -> [usize; 4] {
        pyramid_channels(self.width)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.stem.init(store, Init::Kaiming, rng);
        for st in &self.stages {
            st.down.init(store, Init::Kaiming, rng);
            st.res_a.init(store, Init::Kaiming, rng);
            st.res_b.init(store, Init::Kaiming, rng);
            let w = store
                .get_mut(&st.res_b.weight_name())
                .expect("just inserted");
            *w = w.scale(RESIDUAL_INIT_SCALE);
        }
    }

    /// Input `[3, H, W]` with values in `[0, 1]`; H and W must be multiples of 32.
    pub fn forward<'g>(&self, s: &Session<'g>, image: Var<'g>) -> Result<Vec<Var<'g>>> {
        let shape = image.shape();
        check_input(&shape)?;
        let x = image.add_scalar(-0.5).scale(2.0);
        let mut h = self.stem.forward(s, x).relu();
        let mut levels = Vec::with_capacity(4);
        for st in &self.stages {
            h = st.down.forward(s, h).relu();
            let r = st.res_b.forward(s, st.res_a.forward(s, h).relu());
            h = h.add(r).relu();
            levels.push(h);
        }
        Ok(levels)
    }

    /// Runs on a plain image and packages the result as a pyramid.
    pub fn run(&self, store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
        let g = Graph::new();
        let s = Session::new(&g, store);
        let levels = self.forward(&s, g.constant(image.clone()))?;
        let levels = levels
            .iter()
            .zip(PYRAMID_STRIDES)
            .map(|(v, stride)| FeatureMap::new((*v.value()).clone(), stride))
            .collect::<Result<Vec<_>>>()?;
        FeaturePyramid {
            levels,
            input_height: image.dim(1),
            input_width: image.dim(2),
        }
        .validate(self.channels())
    }
}

fn check_input(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Input(format!(
            "expected a [3, H, W] image, got {shape:?}"
        )));
    }
    if shape[1] == 0
        || shape[2] == 0
        || !shape[1].is_multiple_of(32)
        || !shape[2].is_multiple_of(32)
    {
        return Err(Error::Input(format!(
            "image size {}x{} is not a positive multiple of 32",
            shape[1], shape[2]
        )));
    }
    Ok(())
}
