//! Parameterized hypercomplex multiplication (PHM) layers and the
//! down/up bottleneck that turns node embeddings into prompts.
//!
//! A PHM layer with factor `n` mapping `d → k` keeps `n` small matrices
//! `A_i: n × n` and `n` blocks `S_i: (k/n) × (d/n)` and uses the weight
//! `M = Σ A_i ⊗ S_i` (shape `k × d`). That is `n³ + k·d/n` weights instead
//! of `k·d`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{BoundLinear, Linear};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{kron_raw, Tape, Var};
use crate::tensor::{Parameters, Tensor};

#[derive(Debug, Clone)]
pub struct PhmLayer {
    n: usize,
    input: usize,
    output: usize,
    pub a: Vec<Tensor>,
    pub s: Vec<Tensor>,
    pub bias: Tensor,
}

fn check_divisible(n: usize, input: usize, output: usize) -> Result<()> {
    if n == 0 || input % n != 0 || output % n != 0 || input == 0 || output == 0 {
        return Err(Error::Config(format!(
            "PHM factor {n} must divide input {input} and output {output}"
        )));
    }
    Ok(())
}

impl PhmLayer {
    /// `A_i ~ N(0, 1/n)`, `S_i ~ N(0, 2/(d/n + k/n))`, zero bias.
    pub fn new(n: usize, input: usize, output: usize, name: &str, rng: &mut Rng) -> Result<Self> {
        check_divisible(n, input, output)?;
        let (rows, cols) = (output / n, input / n);
        let a_std = libm::sqrt(1.0 / n as f64);
        let s_std = libm::sqrt(2.0 / (rows + cols) as f64);
        let a = (0..n)
            .map(|i| {
                Tensor::randn(&[n, n], a_std, rng)
                    .with_name(format!("{name}.a{i}"))
                    .trainable()
            })
            .collect();
        let s = (0..n)
            .map(|i| {
                Tensor::randn(&[rows, cols], s_std, rng)
                    .with_name(format!("{name}.s{i}"))
                    .trainable()
            })
            .collect();
        Ok(PhmLayer {
            n,
            input,
            output,
            a,
            s,
            bias: Tensor::zeros(&[output])
                .with_name(format!("{name}.bias"))
                .trainable(),
        })
    }

    /// Builds a layer from explicit factors, e.g. a checkpoint.
    pub fn from_factors(
        n: usize,
        input: usize,
        output: usize,
        a: Vec<Vec<f64>>,
        s: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        check_divisible(n, input, output)?;
        if a.len() != n || s.len() != n {
            return Err(Error::Config(format!(
                "PHM factor {n} needs {n} A and S matrices, got {} and {}",
                a.len(),
                s.len()
            )));
        }
        let (rows, cols) = (output / n, input / n);
        Ok(PhmLayer {
            n,
            input,
            output,
            a: a
                .into_iter()
                .map(|v| Tensor::new(&[n, n], v).map(Tensor::trainable))
                .collect::<Result<_>>()?,
            s: s
                .into_iter()
                .map(|v| Tensor::new(&[rows, cols], v).map(Tensor::trainable))
                .collect::<Result<_>>()?,
            bias: Tensor::new(&[output], bias)?.trainable(),
        })
    }

    pub fn factor(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    /// `M = Σ A_i ⊗ S_i` without a tape.
    pub fn materialize(&self) -> Vec<f64> {
        let (rows, cols) = (self.output / self.n, self.input / self.n);
        let mut m = vec![0.0; self.output * self.input];
        for (a, s) in self.a.iter().zip(&self.s) {
            let k = kron_raw(a.values(), s.values(), self.n, self.n, rows, cols);
            m.iter_mut().zip(&k).for_each(|(x, y)| *x += y);
        }
        m
    }

    /// Puts the factors on the tape and materializes `M` there so gradients
    /// reach every `A_i` and `S_i`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundPhm> {
        let mut m: Option<Var> = None;
        for (a, s) in self.a.iter().zip(&self.s) {
            let av = tape.param(a);
            let sv = tape.param(s);
            let k = tape.kron(av, sv)?;
            m = Some(match m {
                None => k,
                Some(acc) => tape.add(acc, k)?,
            });
        }
        let m = m.expect("n >= 1");
        let m_t = tape.transpose(m)?;
        Ok(BoundPhm {
            weight: m,
            weight_t: m_t,
            bias: tape.param(&self.bias),
        })
    }

    /// Trainable weights excluding the bias: `n³ + k·d/n`.
    pub fn param_count(&self) -> usize {
        phm_param_count(self.n, self.input, self.output)
    }

    /// [`param_count`](Self::param_count) over the dense `k·d`.
    pub fn ratio_vs_fcn(&self) -> f64 {
        self.param_count() as f64 / (self.input * self.output) as f64
    }
}

/// `n³ + k·d/n` for a PHM layer mapping `d → k`.
pub fn phm_param_count(n: usize, input: usize, output: usize) -> usize {
    n * n * n + input * output / n
}

impl Parameters for PhmLayer {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.a.iter().chain(&self.s).collect();
        out.push(&self.bias);
        out
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.a.iter_mut().chain(self.s.iter_mut()).collect();
        out.push(&mut self.bias);
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPhm {
    /// Materialized `k × d` weight.
    pub weight: Var,
    weight_t: Var,
    pub bias: Var,
}

impl BoundPhm {
    /// `x·Mᵀ + b` for a batch of row vectors.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight_t)?;
        tape.add_row(y, self.bias)
    }
}

/// One side of the bottleneck: a PHM layer or, for the ablation, a dense one.
#[derive(Debug, Clone)]
pub enum ProjectionLayer {
    Phm(PhmLayer),
    Dense(Linear),
}

impl ProjectionLayer {
    pub fn input_dim(&self) -> usize {
        match self {
            ProjectionLayer::Phm(l) => l.input_dim(),
            ProjectionLayer::Dense(l) => l.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ProjectionLayer::Phm(l) => l.output_dim(),
            ProjectionLayer::Dense(l) => l.output_dim(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundProjectionLayer> {
        Ok(match self {
            ProjectionLayer::Phm(l) => BoundProjectionLayer::Phm(l.bind(tape)?),
            ProjectionLayer::Dense(l) => BoundProjectionLayer::Dense(l.bind(tape)),
        })
    }
}

impl Parameters for ProjectionLayer {
    fn parameters(&self) -> Vec<&Tensor> {
        match self {
            ProjectionLayer::Phm(l) => l.parameters(),
            ProjectionLayer::Dense(l) => l.parameters(),
        }
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            ProjectionLayer::Phm(l) => l.parameters_mut(),
            ProjectionLayer::Dense(l) => l.parameters_mut(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundProjectionLayer {
    Phm(BoundPhm),
    Dense(BoundLinear),
}

impl BoundProjectionLayer {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            BoundProjectionLayer::Phm(l) => l.forward(tape, x),
            BoundProjectionLayer::Dense(l) => l.forward(tape, x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectorKind {
    Phm { factor: usize },
    Mlp,
}

/// `UpProject(ReLU(DownProject(·)))` from `d` through `d' < d` back to `d`.
#[derive(Debug, Clone)]
pub struct BottleneckProjector {
    pub down: ProjectionLayer,
    pub up: ProjectionLayer,
}

impl BottleneckProjector {
    pub fn phm(dim: usize, hidden: usize, factor: usize, rng: &mut Rng) -> Result<Self> {
        Self::check(dim, hidden)?;
        Ok(BottleneckProjector {
            down: ProjectionLayer::Phm(PhmLayer::new(factor, dim, hidden, "projector.down", rng)?),
            up: ProjectionLayer::Phm(PhmLayer::new(factor, hidden, dim, "projector.up", rng)?),
        })
    }

    pub fn mlp(dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Self::check(dim, hidden)?;
        Ok(BottleneckProjector {
            down: ProjectionLayer::Dense(Linear::new(dim, hidden, "projector.down", rng)),
            up: ProjectionLayer::Dense(Linear::new(hidden, dim, "projector.up", rng)),
        })
    }

    pub fn from_layers(down: ProjectionLayer, up: ProjectionLayer) -> Result<Self> {
        if down.output_dim() != up.input_dim() || down.input_dim() != up.output_dim() {
            return Err(Error::dim(
                "bottleneck",
                &[down.input_dim(), down.output_dim()],
                &[up.input_dim(), up.output_dim()],
            ));
        }
        Ok(BottleneckProjector { down, up })
    }

    fn check(dim: usize, hidden: usize) -> Result<()> {
        if hidden == 0 || hidden >= dim {
            return Err(Error::Config(format!(
                "bottleneck width {hidden} must lie strictly between 0 and {dim}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.down.input_dim()
    }

    pub fn hidden(&self) -> usize {
        self.down.output_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundProjector> {
        Ok(BoundProjector {
            down: self.down.bind(tape)?,
            up: self.up.bind(tape)?,
        })
    }
}

impl Parameters for BottleneckProjector {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = self.down.parameters();
        out.extend(self.up.parameters());
        out
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.down.parameters_mut();
        out.extend(self.up.parameters_mut());
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundProjector {
    pub down: BoundProjectionLayer,
    pub up: BoundProjectionLayer,
}

impl BoundProjector {
    /// Intermediate prompts `P_c` for every row of `h`.
    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let z = self.down.forward(tape, h)?;
        let z = tape.relu(z);
        self.up.forward(tape, z)
    }
}
