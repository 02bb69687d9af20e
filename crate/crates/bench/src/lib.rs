//! Shared problem instances for the benchmarks.

use esreg::sim::simulate;
use esreg::{standardize, Dataset, Design, ResponseModel, SimScenario};

/// One standardized replication of the heteroscedastic abs-normal design.
pub fn problem(n: usize, p: usize, seed: u64) -> (SimScenario, Dataset) {
    let sc = SimScenario {
        n,
        p,
        s: 10.min(p),
        tau: 0.2,
        design: Design::AbsNormalIdentity,
        model: ResponseModel::Heteroscedastic,
        signal_scale: 1.0,
        seed,
        standardize: true,
    };
    let truth = sc.truth().expect("valid scenario");
    let rep = simulate(&sc, &truth, 0).expect("simulation");
    let ds = standardize(&rep.data).expect("non-constant columns").0;
    (sc, ds)
}
