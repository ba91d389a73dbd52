//! Cell-by-cell CTM step used as an independent reference.

use freeway_opt::network::FreewayNetwork;

/// One uncontrolled (or metered) step written out cell by cell.
pub fn scalar_step(
    net: &FreewayNetwork,
    rho: &[f64],
    q: &[f64],
    sigma: &[f64],
    metering: &[f64],
    dt: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = rho.len();
    let mut phi = vec![0.0; n];
    let mut r = vec![0.0; q.len()];
    for i in 0..n {
        let c = &net.cells[i];
        let vr = c.free_flow_speed * rho[i];
        let send = if vr < c.max_flow { vr } else { c.max_flow };
        let ramp = net.ramps.iter().position(|rp| rp.cell_id == i);
        let d = match ramp {
            Some(k) => {
                let avail = q[k] / dt;
                if avail < metering[k] {
                    avail
                } else {
                    metering[k]
                }
            }
            None => 0.0,
        };
        if i == n - 1 {
            phi[i] = send;
            if let Some(k) = ramp {
                r[k] = d;
            }
            continue;
        }
        let big_d = send * (1.0 - c.split_ratio) + d;
        let next = &net.cells[i + 1];
        let wave = next.wave_speed * (next.max_density - rho[i + 1]);
        let s = if wave < next.max_flow { wave } else { next.max_flow };
        let ratio = if big_d == 0.0 {
            1.0
        } else if big_d < s {
            1.0
        } else {
            s / big_d
        };
        phi[i] = send * ratio;
        if let Some(k) = ramp {
            r[k] = d * ratio;
        }
    }
    let mut q_next = q.to_vec();
    for k in 0..q.len() {
        q_next[k] = q[k] + dt * (sigma[k] - r[k]);
    }
    let mut rho_next = rho.to_vec();
    for i in 0..n {
        let up = if i == 0 {
            0.0
        } else {
            phi[i - 1] * (1.0 - net.cells[i - 1].split_ratio)
        };
        let on = net
            .ramps
            .iter()
            .position(|rp| rp.cell_id == i)
            .map_or(0.0, |k| r[k]);
        rho_next[i] = rho[i] + dt / net.cells[i].length * (up + on - phi[i]);
    }
    (rho_next, q_next, phi, r)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}
