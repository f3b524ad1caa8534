use super::{Graph, ParamStore};
use crate::error::Result;
use crate::tensor::check::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::tensor::{Tensor, Var};

/// Finite-difference check of a module over all of its parameters and the
/// given inputs. `f` receives a graph whose parameters are perturbable and
/// the input variables, and must return a scalar.
///
/// In the report, indices below `store.len()` refer to parameters; the rest
/// refer to `inputs`.
pub fn gradient_check<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let n_params = store.len();
    let mut all: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    all.extend(inputs.iter().cloned());
    check_gradients(&all, opts, |tape, vars| {
        let g = Graph::prebound(tape, store, &vars[..n_params]);
        f(&g, &vars[n_params..])
    })
}
