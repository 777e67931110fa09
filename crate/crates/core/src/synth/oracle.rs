use super::dataset::Trajectory;
use super::task::TaskSpec;

/// Ground-truth robot feasibility: every step within `v_max`, `|theta| <=
/// theta_max` whenever the gripper closes, and toggles at least
/// `gripper_latency` steps apart.
pub fn feasibility_oracle(traj: &Trajectory, task: &TaskSpec) -> bool {
    let limits = &task.limits;
    let mut last_toggle: Option<usize> = None;
    for (t, (s, a)) in traj.states.iter().zip(&traj.actions).enumerate() {
        let step = ((a[0] - s[0]).powi(2) + (a[1] - s[1]).powi(2)).sqrt();
        if step > limits.v_max * (1.0 + 1e-9) {
            return false;
        }
        let was_closed = s[3] >= 0.5;
        let closed = a[3] >= 0.5;
        if was_closed != closed {
            if let Some(last) = last_toggle {
                if t - last < limits.gripper_latency {
                    return false;
                }
            }
            last_toggle = Some(t);
            if closed && a[2].abs() > limits.theta_max {
                return false;
            }
        }
    }
    true
}
