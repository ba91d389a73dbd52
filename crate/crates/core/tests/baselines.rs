//! Reference strategies driven through the simulator.

mod common;

use common::scenarios::{random_demand, random_network, random_state};
use freeway_opt::baselines::{alinea_step, no_control, Alinea, AlineaConfig};
use freeway_opt::ctm::{self, Control, NoControl};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn no_control_matches_the_simulator() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..20 {
        let (net, dt) = random_network(&mut rng, 6, 2);
        let state = random_state(&mut rng, &net);
        let demand = random_demand(&mut rng, &net, 10, dt);
        let sim = ctm::simulate(&net, &state, &demand, &mut NoControl, 10).unwrap();
        for (s, f) in sim.states.iter().zip(&sim.flows) {
            assert_eq!(&no_control(&net, s, &demand).unwrap(), f);
        }
    }
}

#[test]
fn alinea_replays_its_own_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..10 {
        let (net, dt) = random_network(&mut rng, 5, 1);
        let state = random_state(&mut rng, &net);
        let demand = random_demand(&mut rng, &net, 12, dt);
        let config = AlineaConfig::critical(&net, 0.9);
        let sim = ctm::simulate(&net, &state, &demand, &mut Alinea::new(&net, config.clone()).unwrap(), 12).unwrap();

        // Recompute every metering rate from the recorded states.
        let mut rates: Vec<f64> = net.ramps.iter().map(|r| r.metering_capacity).collect();
        for (k, s) in sim.states[..12].iter().enumerate() {
            for (i, ramp) in net.ramps.iter().enumerate() {
                rates[i] = alinea_step(
                    rates[i],
                    s.density[ramp.cell_id],
                    config.setpoints[i],
                    config.gain,
                    s.queue[i],
                    dt,
                    ramp.max_metering,
                );
            }
            let expect = ctm::step(&net, s, &demand, &Control::Metered(rates.clone())).unwrap();
            assert_eq!(expect.flows, sim.flows[k]);
        }
    }
}
