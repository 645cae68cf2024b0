//! Named parameter groups and their binding onto a [`Graph`].

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradients keyed by dotted parameter name, in visit order.
pub type Gradients = IndexMap<String, Tensor>;

/// A collection of learnable tensors addressable by stable dotted names.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _| out.push(name));
        out
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Total number of scalar parameters.
    fn count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Order-sensitive bit-level fingerprint of every value.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit("", &mut |name, t| {
            for b in name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        });
        h
    }
}

/// Graph handles for a parameter group, visited in the same order and with
/// the same names as the owning [`Parameters`].
pub trait BoundParameters {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var));
}

impl<P: Parameters> Parameters for Option<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

impl<B: BoundParameters> BoundParameters for Option<B> {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        if let Some(b) = self {
            b.visit_vars(prefix, f);
        }
    }
}

/// Reads the gradient of every bound parameter after `backward`.
pub fn collect_grads(graph: &Graph, bound: &impl BoundParameters) -> Gradients {
    let mut out = Gradients::new();
    bound.visit_vars("", &mut |name, var| {
        let grad = graph
            .grad(var)
            .unwrap_or_else(|| Tensor::zeros(graph.shape(var)));
        out.insert(name, grad);
    });
    out
}

/// Declares a parameter struct, its bound-variable twin, and the visitor impls.
macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident => $vars:ident {
            $( $(#[$fmeta:meta])* $field:ident : $label:literal ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $crate::tensor::Tensor, )*
        }

        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $( pub $field: $crate::graph::Var, )*
        }

        impl $name {
            /// Inserts every tensor into `graph` as a gradient-tracking leaf.
            pub fn bind(&self, graph: &mut $crate::graph::Graph) -> $crate::error::Result<$vars> {
                self.bind_with(graph, true)
            }

            pub fn bind_with(
                &self,
                graph: &mut $crate::graph::Graph,
                requires_grad: bool,
            ) -> $crate::error::Result<$vars> {
                Ok($vars { $( $field: graph.leaf(self.$field.clone(), requires_grad)?, )* })
            }

            /// Rebuilds the handles from existing variables in visit order.
            pub fn vars_from(
                vars: &mut dyn Iterator<Item = $crate::graph::Var>,
            ) -> $crate::error::Result<$vars> {
                Ok($vars { $( $field: vars.next().ok_or_else(|| {
                    $crate::error::Error::Contract(format!("no variable for {}", $label))
                })?, )* })
            }
        }

        impl $crate::params::Parameters for $name {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &$crate::tensor::Tensor)) {
                $( f(format!("{prefix}{}", $label), &self.$field); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor)) {
                $( f(format!("{prefix}{}", $label), &mut self.$field); )*
            }
        }

        impl $crate::params::BoundParameters for $vars {
            fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, $crate::graph::Var)) {
                $( f(format!("{prefix}{}", $label), self.$field); )*
            }
        }
    };
}
pub(crate) use param_group;

/// Seeded source of Xavier-uniform weights and zero biases.
#[derive(Debug, Clone)]
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `fan_in × fan_out` matrix drawn from U(-b, b), b = √(6 / (fan_in + fan_out)).
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = xavier_bound(fan_in, fan_out);
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::matrix(fan_in, fan_out, data).expect("positive fan sizes")
    }

    pub fn bias(&mut self, len: usize) -> Tensor {
        Tensor::zeros(&[len])
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
#[allow(dead_code)]
mod tests {
    use super::*;

    param_group! {
        pub struct Demo => DemoVars {
            w: "W",
            b: "b",
        }
    }

    #[test]
    fn names_follow_declaration_order() {
        let demo = Demo {
            w: Tensor::zeros(&[2, 2]),
            b: Tensor::zeros(&[2]),
        };
        assert_eq!(demo.names(), vec!["W", "b"]);
        assert_eq!(demo.count(), 6);
        let mut g = Graph::new();
        let vars = demo.bind(&mut g).unwrap();
        let mut names = Vec::new();
        vars.visit_vars("x.", &mut |n, _| names.push(n));
        assert_eq!(names, vec!["x.W", "x.b"]);
    }

    #[test]
    fn xavier_is_bounded_and_seeded() {
        let a = Initializer::new(3).xavier(10, 20);
        let b = Initializer::new(3).xavier(10, 20);
        assert_eq!(a, b);
        let bound = xavier_bound(10, 20);
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }
}
