use super::params::{BufferId, Init, ParamGroup, ParamId, ParamStore};
use super::tape::{Ctx, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Stride-1 convolution with `kernel / 2` zero padding and a bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        seed: u64,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            group,
            &[cout, cin, kernel, kernel],
            Init::HeUniform { fan_in },
            seed,
        );
        let bias = store.add(
            &format!("{name}.bias"),
            group,
            &[cout],
            Init::BiasUniform { fan_in },
            seed,
        );
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        ctx.conv2d(x, self.weight, Some(self.bias))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// Zeroes weight and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.param_mut(id).value_mut().data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        channels: usize,
        seed: u64,
    ) -> Self {
        let gamma = store.add(
            &format!("{name}.gamma"),
            group,
            &[channels],
            Init::Constant(1.0),
            seed,
        );
        let beta = store.add(
            &format!("{name}.beta"),
            group,
            &[channels],
            Init::Constant(0.0),
            seed,
        );
        let running_mean =
            store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(
            &format!("{name}.running_var"),
            Tensor::full(&[channels], 1.0),
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        ctx.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
        )
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// convolution → batch norm → activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub activation: Activation,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                group,
                cin,
                cout,
                kernel,
                seed,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), group, cout, seed),
            activation,
        }
    }

    pub fn relu(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        seed: u64,
    ) -> Self {
        Self::new(
            store,
            name,
            group,
            cin,
            cout,
            kernel,
            Activation::Relu,
            seed,
        )
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, &y)?;
        Ok(match self.activation {
            Activation::Relu => ctx.relu(&y),
            Activation::Sigmoid => ctx.sigmoid(&y),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids().to_vec();
        ids.extend(self.bn.param_ids());
        ids
    }

    pub fn in_channels(&self) -> usize {
        self.conv.cin
    }

    pub fn out_channels(&self) -> usize {
        self.conv.cout
    }
}

/// Runs blocks in sequence.
pub fn run_blocks(ctx: &Ctx, blocks: &[ConvBlock], x: &Var) -> Result<Var> {
    let mut y = x.clone();
    for b in blocks {
        y = b.forward(ctx, &y)?;
    }
    Ok(y)
}
