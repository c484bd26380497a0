use super::scene::dist;
use super::{Instruction, Scene, WorldConfig};
use crate::error::{Error, Result};
use crate::trajectory::ActionTrajectory;

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOutcome {
    pub success: bool,
    pub gripper: [f64; 2],
    pub objects: Vec<[f64; 2]>,
    /// Index into `scene.objects` of the object held at the end, if any.
    pub held: Option<usize>,
}

/// Straight-line plan with fixed phase lengths: constant velocity to the
/// object over `approach_steps`, constant velocity to the receptacle over
/// `carry_steps`, then zeros. A phase needing more than `v_max` per step is a
/// horizon error.
pub fn expert_policy(scene: &Scene, instr: &Instruction, world: &WorldConfig) -> Result<ActionTrajectory> {
    instr.validate(scene)?;
    if world.action_dim != 2 {
        return Err(Error::contract("expert plans planar (2-D) actions only"));
    }
    let obj = scene.object(instr.object).expect("validated").pos;
    let rec = scene.receptacle(instr.receptacle).expect("validated").pos;
    let h = world.horizon;
    let mut traj = ActionTrajectory::zeros(h, 2);
    if dist(obj, rec) <= world.success_radius {
        return Ok(traj);
    }
    let (n1, n2) = (world.approach_steps, world.carry_steps);
    let mut needed = 0;
    let mut feasible = n1 + n2 <= h;
    for (from, to, n) in [(scene.start, obj, n1), (obj, rec, n2)] {
        let min_steps = (dist(from, to) / world.v_max).ceil() as usize;
        feasible &= min_steps <= n;
        needed += n.max(min_steps);
    }
    if !feasible {
        return Err(Error::Horizon { horizon: h, needed });
    }
    let mut t = 0;
    for (from, to, n) in [(scene.start, obj, n1), (obj, rec, n2)] {
        let v = [(to[0] - from[0]) / n as f64, (to[1] - from[1]) / n as f64];
        for _ in 0..n {
            traj.data[2 * t] = v[0];
            traj.data[2 * t + 1] = v[1];
            t += 1;
        }
    }
    Ok(traj)
}

/// Integrates velocity commands from the scene's start.
///
/// After every step the gripper grasps the nearest object within the success
/// radius if it is empty-handed; a held object travels with the gripper.
/// Success means the instructed object ends within the radius of the
/// instructed receptacle.
pub fn rollout(
    scene: &Scene,
    instr: &Instruction,
    actions: &ActionTrajectory,
    world: &WorldConfig,
) -> Result<RolloutOutcome> {
    instr.validate(scene)?;
    if actions.dim != 2 {
        return Err(Error::dim(format!("rollout needs 2-D actions, got {}", actions.dim)));
    }
    let mut g = scene.start;
    let mut objects: Vec<[f64; 2]> = scene.objects.iter().map(|e| e.pos).collect();
    let mut held: Option<usize> = None;
    grasp(&mut held, &mut objects, g, world.success_radius);
    for a in actions.steps() {
        g = [
            (g[0] + a[0]).clamp(0.0, world.extent),
            (g[1] + a[1]).clamp(0.0, world.extent),
        ];
        grasp(&mut held, &mut objects, g, world.success_radius);
    }
    let oi = scene
        .objects
        .iter()
        .position(|e| e.kind == instr.object)
        .expect("validated");
    let rec = scene.receptacle(instr.receptacle).expect("validated").pos;
    Ok(RolloutOutcome {
        success: dist(objects[oi], rec) <= world.success_radius,
        gripper: g,
        objects,
        held,
    })
}

fn grasp(held: &mut Option<usize>, objects: &mut [[f64; 2]], g: [f64; 2], radius: f64) {
    match *held {
        Some(i) => objects[i] = g,
        None => {
            let nearest = objects
                .iter()
                .enumerate()
                .map(|(i, &p)| (i, dist(p, g)))
                .filter(|&(_, d)| d <= radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = nearest {
                *held = Some(i);
                objects[i] = g;
            }
        }
    }
}
