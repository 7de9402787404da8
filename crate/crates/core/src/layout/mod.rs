//! Layout geometry, rewards, planning and the planner exchange format.

mod geometry;
pub mod grpo;
mod planner;
pub mod protocol;
mod reward;

pub use geometry::{iou, BBox, Layout, LayoutItem};
pub use grpo::{grpo_advantages, grpo_toy_train, toy_tasks, GrpoConfig, GrpoRun, LinearGaussianPolicy, ToyTask};
pub use planner::{
    plan_coarse, plan_fine, BaselinePlanner, LayoutLlm, LayoutQuery, LayoutTask, MllmPlanner,
    PlanStage, Planner, PlannerOutput, ScriptedLayoutLlm, StubLayoutLlm,
};
pub use protocol::{json_to_layout, layout_to_json, LayoutParseError};
pub use reward::{
    reward_balance, reward_balance_boxes, reward_iou, reward_iou_boxes, reward_overlap,
    reward_overlap_boxes, total_reward, total_reward_boxes, RewardBreakdown, RewardWeights,
    DEFAULT_EPS,
};
