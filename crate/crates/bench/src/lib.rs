//! Fixtures shared by the benchmarks: a randomly initialized checkpoint at full
//! network width and a fixed batch of sample points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rccm::certificates::{sample_point, SamplePoint, WSampling};
use rccm::certnets::Hyperparams;
use rccm::{make_system, CertificateCheckpoint, ControlAffineSystem, GainParams};

pub struct Fixture {
    pub sys: ControlAffineSystem,
    pub ck: CertificateCheckpoint,
    pub batch: Vec<SamplePoint>,
}

pub fn fixture(system: &str, batch: usize) -> Fixture {
    let sys = make_system(system).expect("known system");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ck = CertificateCheckpoint::init(
        system,
        sys.n(),
        sys.m(),
        &sys.network_inputs(),
        Hyperparams::default(),
        sys.training_selector(0.1).expect("selector"),
        GainParams::from_alpha_mu(2.0, 0.5).expect("gains"),
        &mut rng,
    )
    .expect("checkpoint");
    let batch = (0..batch)
        .map(|_| sample_point(&sys, sys.sigma, WSampling::BallUniformRadius, &mut rng))
        .collect();
    Fixture { sys, ck, batch }
}
