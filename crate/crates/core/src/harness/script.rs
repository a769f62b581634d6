//! Gold replay scripts: synthesized assistant transcripts that walk a
//! task's workflow stage by stage and issue its gold trajectory calls.
//!
//! The builder simulates the conversation against a scratch sandbox session
//! sharing the live run's fault plan, so scripted handle ids, injected
//! fault positions, and correction ordering line up exactly with what the
//! run will see. One script serves every agent mode: stage tags and the
//! routing reply are ignored by ungated runs, reflection and confirmation
//! replies are keyed on the prompts that request them and stay unused when
//! those prompts are never sent.

use std::collections::{BTreeSet, VecDeque};

use serde_json::Value;

use crate::agent::{
    compose_turn_instruction, reflection_prompt, AgentConfig, TERMINATE_CONFIRM_PROMPT,
};
use crate::backends::{match_key_for, ReplayScript, ToolMode};
use crate::ledger::{Role, ToolCall, ToolRegistry, ToolResult, ToolStatus, UsageRecord};
use crate::rng::{fnv1a64, SplitMix64};
use crate::sandbox::{FaultPlan, SandboxError, SandboxSession, World};
use crate::taskgen::{handle_source_slot, wired_handle_param, CallMatcher, HandleSlot, TaskSpec};
use crate::workflow::{
    tools_for_state, validate_transition, TransitionDecision, TransitionMode, WorkflowSpec,
};

use super::HarnessError;

/// How a synthesized script departs from a clean gold replay.
#[derive(Debug, Clone, Default)]
pub struct ScriptPlan {
    /// Fault plan the live run's sandbox will use. The builder replays the
    /// same plan so corrections are scripted exactly where faults land.
    pub fault_plan: Option<FaultPlan>,
    /// Interrupt with a bare TERMINATE reply once this many gold calls have
    /// completed. Must point strictly before the last call; the script also
    /// carries a confirmation reply that retracts the interruption, so
    /// validated runs resume and face-value runs stop short.
    pub premature_terminate_after: Option<usize>,
}

/// Rounds of scripted retries tolerated per gold call before concluding the
/// fault plan never lets it through.
const MAX_RETRY_ROUNDS: usize = 32;

pub fn build_gold_script(
    world: &World,
    spec: &WorkflowSpec,
    registry: &ToolRegistry,
    task: &TaskSpec,
    config: &AgentConfig,
    plan: &ScriptPlan,
) -> Result<ReplayScript, HarnessError> {
    let scratch = tempfile::tempdir()?;
    let session = SandboxSession::new(
        world,
        task.task_id.clone(),
        scratch.path(),
        plan.fault_plan.clone(),
    );
    let builder = Builder {
        spec,
        registry,
        task,
        text_mode: config.tool_mode == ToolMode::Text,
        max_turns: config.max_turns,
        session,
        script: ReplayScript::new(),
        last_image: None,
        last_detection: None,
        cur_state: spec.initial.clone(),
        usage_slot: 0,
        turns: 0,
        call_seq: 0,
        retry_seq: 0,
    };
    let script = builder.build(plan)?;
    drop(scratch);
    Ok(script)
}

struct Builder<'w, 'a> {
    spec: &'a WorkflowSpec,
    registry: &'a ToolRegistry,
    task: &'a TaskSpec,
    text_mode: bool,
    max_turns: u32,
    session: SandboxSession<'w>,
    script: ReplayScript,
    last_image: Option<String>,
    last_detection: Option<String>,
    cur_state: String,
    usage_slot: u64,
    turns: u32,
    call_seq: u32,
    retry_seq: u32,
}

impl Builder<'_, '_> {
    fn build(mut self, plan: &ScriptPlan) -> Result<ReplayScript, HarnessError> {
        if self.spec.is_intent_routed() {
            self.script_routing()?;
        }
        let states = self.call_states()?;

        let mut premature = plan.premature_terminate_after;
        if let Some(n) = premature {
            if n + 1 >= self.task.gold_trajectory.len() {
                return Err(HarnessError::Invalid(format!(
                    "premature TERMINATE after {n} calls needs a shorter prefix than the \
                     {}-call trajectory",
                    self.task.gold_trajectory.len()
                )));
            }
        }

        for (i, matcher) in self.task.gold_trajectory.iter().enumerate() {
            if premature == Some(i) {
                premature = None;
                self.script_premature_terminate();
            }
            self.bridge_to(&states[i])?;
            self.script_call(matcher)?;
        }

        self.script_finish()?;
        if self.turns > self.max_turns {
            return Err(HarnessError::Invalid(format!(
                "script for {} needs {} turns but the run allows {}",
                self.task.task_id, self.turns, self.max_turns
            )));
        }
        Ok(self.script)
    }

    /// The routing reply, keyed on the initial stage's instruction. Only the
    /// routing pre-turn sends that instruction: routed runs never take a
    /// regular turn in the initial stage.
    fn script_routing(&mut self) -> Result<(), HarnessError> {
        let intent = self.task.intent_gold.clone().ok_or_else(|| {
            HarnessError::Invalid(format!(
                "task {} runs intent-routed workflow {:?} but has no gold intent",
                self.task.task_id, self.spec.name
            ))
        })?;
        let entry = self.spec.route_for(&intent).ok_or_else(|| {
            HarnessError::Invalid(format!(
                "workflow {:?} has no route for intent {intent:?}",
                self.spec.name
            ))
        })?;
        let tools = tools_for_state(self.spec, &self.spec.initial, self.registry)?;
        let instruction = compose_turn_instruction(
            self.spec,
            &self.spec.initial,
            &tools,
            None,
            self.text_mode,
        );
        self.cur_state = entry.to_string();
        let text = format!("This is a {intent} request.\nUSER_INTENT = {intent}");
        let usage = self.next_usage();
        self.script
            .push_match(match_key_for(Role::User, &instruction), text, Vec::new(), usage);
        Ok(())
    }

    /// The stage each gold call runs in: a forward walk that stops at the
    /// first reachable stage offering the call's tool.
    fn call_states(&self) -> Result<Vec<String>, HarnessError> {
        let mut cur = self.cur_state.clone();
        let mut out = Vec::with_capacity(self.task.gold_trajectory.len());
        for matcher in &self.task.gold_trajectory {
            cur = self.state_offering(&cur, &matcher.name)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    fn state_offering(&self, from: &str, tool: &str) -> Result<String, HarnessError> {
        let mut queue = VecDeque::from([from.to_string()]);
        let mut seen = BTreeSet::new();
        while let Some(state) = queue.pop_front() {
            if !seen.insert(state.clone()) {
                continue;
            }
            let offered = tools_for_state(self.spec, &state, self.registry)?;
            if offered.iter().any(|t| t.name == tool) {
                return Ok(state);
            }
            for succ in self.spec.successors(&state) {
                queue.push_back(succ.clone());
            }
        }
        Err(HarnessError::Invalid(format!(
            "no stage reachable from {from:?} offers {tool:?} in workflow {:?}",
            self.spec.name
        )))
    }

    /// Successor hops from `from` (exclusive) to `to` (inclusive).
    fn path(&self, from: &str, to: &str) -> Result<Vec<String>, HarnessError> {
        if from == to {
            return Ok(Vec::new());
        }
        let mut queue = VecDeque::from([from.to_string()]);
        let mut parent = std::collections::BTreeMap::new();
        let mut seen = BTreeSet::from([from.to_string()]);
        while let Some(state) = queue.pop_front() {
            for succ in self.spec.successors(&state) {
                if seen.insert(succ.clone()) {
                    parent.insert(succ.clone(), state.clone());
                    queue.push_back(succ.clone());
                }
            }
        }
        if !parent.contains_key(to) {
            return Err(HarnessError::Invalid(format!(
                "no stage path from {from:?} to {to:?} in workflow {:?}",
                self.spec.name
            )));
        }
        let mut hops = Vec::new();
        let mut cur = to.to_string();
        while cur != from {
            hops.push(cur.clone());
            cur = parent[&cur].clone();
        }
        hops.reverse();
        Ok(hops)
    }

    /// No-call turns advancing one legal hop at a time.
    fn bridge_to(&mut self, target: &str) -> Result<(), HarnessError> {
        for hop in self.path(&self.cur_state.clone(), target)? {
            self.check_hop(&hop)?;
            self.push_turn(
                format!("Stage work here is done; moving on.\nCURRENT_STAGE = {hop}"),
                Vec::new(),
            );
            self.cur_state = hop;
        }
        Ok(())
    }

    fn check_hop(&self, to: &str) -> Result<(), HarnessError> {
        let decision =
            validate_transition(self.spec, &self.cur_state, to, TransitionMode::Strict)?;
        if decision == TransitionDecision::Accept {
            Ok(())
        } else {
            Err(HarnessError::Invalid(format!(
                "scripted hop {} -> {to} is not a legal transition in workflow {:?}",
                self.cur_state, self.spec.name
            )))
        }
    }

    /// One gold call: the turn that issues it plus, when the sandbox
    /// injects faults, the reflection replies and holding turns that carry
    /// the retries until one goes through.
    fn script_call(&mut self, matcher: &CallMatcher) -> Result<(), HarnessError> {
        let call = self.wire(matcher)?;
        let result = self.session.execute(&call);
        self.push_turn(
            format!(
                "Running {} for the {} stage.\nCURRENT_STAGE = {}",
                matcher.name, self.cur_state, self.cur_state
            ),
            vec![call.clone()],
        );
        if result.status == ToolStatus::Ok {
            self.absorb(&matcher.name, &result.payload);
            return Ok(());
        }
        self.ensure_injected(&call, &result)?;

        let mut failed = (call, result);
        for _ in 0..MAX_RETRY_ROUNDS {
            let retry = self.retry_of(&failed.0);
            let prompt = reflection_prompt(
                &failed.0,
                &failed.1.payload,
                self.registry.get(&matcher.name),
            );
            let usage = self.next_usage();
            self.script.push_match(
                match_key_for(Role::User, &prompt),
                "The error reads transient; reissuing the documented call unchanged.",
                vec![retry.clone()],
                usage,
            );
            let result = self.session.execute(&retry);
            if result.status == ToolStatus::Ok {
                self.absorb(&matcher.name, &result.payload);
                // The retry executes at the top of this turn; the reply
                // itself holds position and carries nothing new.
                self.push_turn(
                    format!(
                        "Confirming the retry went through.\nCURRENT_STAGE = {}",
                        self.cur_state
                    ),
                    Vec::new(),
                );
                return Ok(());
            }
            self.ensure_injected(&retry, &result)?;
            self.push_turn(
                format!(
                    "Still failing; holding here until it clears.\nCURRENT_STAGE = {}",
                    self.cur_state
                ),
                Vec::new(),
            );
            failed = (retry, result);
        }
        Err(HarnessError::Invalid(format!(
            "fault plan never lets {} through for task {}",
            matcher.name, self.task.task_id
        )))
    }

    /// A stray TERMINATE mid-run, paired with a confirmation reply that
    /// retracts it.
    fn script_premature_terminate(&mut self) {
        self.push_turn(
            format!(
                "The request looks satisfied; stopping here. TERMINATE\nCURRENT_STAGE = {}",
                self.cur_state
            ),
            Vec::new(),
        );
        let usage = self.next_usage();
        self.script.push_match(
            match_key_for(Role::User, TERMINATE_CONFIRM_PROMPT),
            "On review, later stages have not run; resuming the workflow.",
            Vec::new(),
            usage,
        );
    }

    /// Bridges to the terminal stage, puts TERMINATE on the final turn for
    /// runs that never see the stage machine, and scripts the confirmation
    /// reply those runs get when they validate the TERMINATE.
    fn script_finish(&mut self) -> Result<(), HarnessError> {
        let terminal = self.nearest_terminal()?;
        let hops = self.path(&self.cur_state.clone(), &terminal)?;
        if hops.is_empty() {
            return Err(HarnessError::Invalid(format!(
                "gold trajectory for {} already sits in terminal stage {terminal:?}",
                self.task.task_id
            )));
        }
        let last = hops.len() - 1;
        for (i, hop) in hops.iter().enumerate() {
            self.check_hop(hop)?;
            let text = if i == last {
                format!(
                    "All stages are complete and the answer is recorded.\n\
                     CURRENT_STAGE = {hop}\nTERMINATE"
                )
            } else {
                format!("Stage work here is done; moving on.\nCURRENT_STAGE = {hop}")
            };
            self.push_turn(text, Vec::new());
            self.cur_state = hop.clone();
        }
        let usage = self.next_usage();
        self.script.push_match(
            match_key_for(Role::User, TERMINATE_CONFIRM_PROMPT),
            "Confirmed: the final answer is recorded. TERMINATE",
            Vec::new(),
            usage,
        );
        Ok(())
    }

    fn nearest_terminal(&self) -> Result<String, HarnessError> {
        let mut queue = VecDeque::from([self.cur_state.clone()]);
        let mut seen = BTreeSet::new();
        while let Some(state) = queue.pop_front() {
            if !seen.insert(state.clone()) {
                continue;
            }
            if self.spec.state(&state).is_some_and(|s| s.is_terminal) {
                return Ok(state);
            }
            for succ in self.spec.successors(&state) {
                queue.push_back(succ.clone());
            }
        }
        Err(HarnessError::Invalid(format!(
            "no terminal stage reachable from {:?} in workflow {:?}",
            self.cur_state, self.spec.name
        )))
    }

    fn wire(&mut self, matcher: &CallMatcher) -> Result<ToolCall, HarnessError> {
        let mut call = ToolCall::new(format!("g{}", self.call_seq), &matcher.name);
        self.call_seq += 1;
        call.arguments = matcher.required_args.clone();
        if let Some((param, slot)) = wired_handle_param(&matcher.name) {
            if !call.arguments.contains_key(param) {
                let source = match slot {
                    HandleSlot::ImageSet => &self.last_image,
                    HandleSlot::DetectionSet => &self.last_detection,
                };
                let handle = source.clone().ok_or_else(|| {
                    HarnessError::Invalid(format!(
                        "gold step {} for task {} has no prior handle to wire",
                        matcher.name, self.task.task_id
                    ))
                })?;
                call.arguments.insert(param.into(), Value::from(handle));
            }
        }
        Ok(call)
    }

    fn retry_of(&mut self, call: &ToolCall) -> ToolCall {
        let mut retry = call.clone();
        retry.call_id = format!("r{}", self.retry_seq);
        self.retry_seq += 1;
        retry
    }

    fn absorb(&mut self, tool: &str, payload: &str) {
        let Ok(doc) = serde_json::from_str::<Value>(payload) else { return };
        let Some(handle) = doc.get("handle").and_then(Value::as_str) else { return };
        match handle_source_slot(tool) {
            Some(HandleSlot::ImageSet) => self.last_image = Some(handle.to_string()),
            Some(HandleSlot::DetectionSet) => self.last_detection = Some(handle.to_string()),
            None => {}
        }
    }

    fn ensure_injected(&self, call: &ToolCall, result: &ToolResult) -> Result<(), HarnessError> {
        if result.payload == SandboxError::InjectedFault.to_string() {
            Ok(())
        } else {
            Err(HarnessError::GoldExecution {
                task_id: self.task.task_id.clone(),
                call: call.name.clone(),
                message: result.payload.clone(),
            })
        }
    }

    fn push_turn(&mut self, text: String, calls: Vec<ToolCall>) {
        let usage = self.next_usage();
        self.script.push_ordinal(text, calls, usage);
        self.turns += 1;
    }

    fn next_usage(&mut self) -> Option<UsageRecord> {
        self.usage_slot += 1;
        Some(scripted_usage(&self.task.task_id, self.usage_slot))
    }
}

/// Synthetic per-reply usage, a pure function of task id and reply slot so
/// repeated builds produce byte-identical scripts. Wall times are dyadic
/// fractions, keeping summed totals exact.
fn scripted_usage(task_id: &str, slot: u64) -> UsageRecord {
    let seed = fnv1a64(task_id.as_bytes()) ^ slot.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = SplitMix64::new(seed);
    let input = 420 + rng.next_below(600);
    let output = 40 + rng.next_below(80);
    let wall = 0.125 + rng.next_below(48) as f64 / 256.0;
    UsageRecord::reported(input, 0, output, wall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{run_task, AgentMode, RunRecord, RunStatus};
    use crate::backends::ReplayBackend;
    use crate::eval::{match_trajectory, success_check};
    use crate::ledger::Ledger;
    use crate::sandbox::{generate_catalog, registry};
    use crate::taskgen::{default_templates, generate_tasks};
    use crate::workflow::{bundled, load_workflow_spec};
    use std::path::Path;

    fn world() -> World {
        generate_catalog(11, 60, 4)
    }

    fn tasks(world: &World) -> Vec<TaskSpec> {
        generate_tasks(world, &default_templates(), 1, 5).expect("bundle generates")
    }

    fn spec_for(task: &TaskSpec) -> WorkflowSpec {
        let text = bundled::by_name(&task.workflow).expect("bundled workflow");
        load_workflow_spec(text, &registry()).expect("workflow loads")
    }

    fn run_with(
        world: &World,
        task: &TaskSpec,
        config: &AgentConfig,
        plan: &ScriptPlan,
        out_dir: &Path,
    ) -> (RunRecord, Ledger) {
        let reg = registry();
        let spec = spec_for(task);
        let script = build_gold_script(world, &spec, &reg, task, config, plan).expect("script");
        let mut backend = ReplayBackend::new(script);
        let mut session =
            SandboxSession::new(world, task.task_id.clone(), out_dir, plan.fault_plan.clone());
        run_task(&spec, &reg, &mut session, &mut backend, config, &task.task_id, &task.query)
            .expect("run")
    }

    fn by_template<'t>(tasks: &'t [TaskSpec], template: &str) -> &'t TaskSpec {
        tasks
            .iter()
            .find(|t| t.task_id.starts_with(template))
            .unwrap_or_else(|| panic!("no task from template {template}"))
    }

    fn assistant_count(ledger: &Ledger) -> u32 {
        ledger.messages().iter().filter(|m| m.role == Role::Assistant).count() as u32
    }

    #[test]
    fn every_bundled_task_replays_to_a_clean_completion() {
        let world = world();
        let reg = registry();
        let config = AgentConfig::for_mode(AgentMode::Stateflow);
        for task in tasks(&world) {
            let dir = tempfile::tempdir().unwrap();
            let (record, ledger) = run_with(&world, &task, &config, &ScriptPlan::default(), dir.path());
            assert_eq!(record.status, RunStatus::Completed, "task {}", task.task_id);
            assert!(success_check(&task, &record, dir.path()), "task {}", task.task_id);
            let executed: Vec<ToolCall> =
                record.trajectory.iter().map(|e| e.call.clone()).collect();
            let matched = match_trajectory(&task.gold_trajectory, &executed);
            assert_eq!(matched.correctness, 1.0, "task {}", task.task_id);
            assert_eq!(record.reminders, 0);
            assert_eq!(record.reflections, 0);
            assert!(record.turns <= config.max_turns);
            // Backend-call bookkeeping: every assistant message is a turn,
            // reflection, confirmation, or routing attempt.
            assert_eq!(
                assistant_count(&ledger),
                record.turns
                    + record.reflections
                    + record.terminate_validations
                    + record.routing_calls
            );
            for exec in &record.trajectory {
                let state = exec.state_before.as_deref().expect("gated run records stages");
                let allowed = tools_for_state(&spec_for(&task), state, &reg).unwrap();
                assert!(
                    allowed.iter().any(|t| t.name == exec.call.name),
                    "{} ran outside its stage",
                    exec.call.name
                );
            }
        }
    }

    #[test]
    fn routed_tasks_resolve_their_gold_intent_in_one_call() {
        let world = world();
        let all = tasks(&world);
        let task = by_template(&all, "forest_loss_sum");
        let config = AgentConfig::for_mode(AgentMode::Stateflow);
        let dir = tempfile::tempdir().unwrap();
        let (record, _) = run_with(&world, task, &config, &ScriptPlan::default(), dir.path());
        assert_eq!(record.intent_resolved.as_deref(), Some("Forest"));
        assert_eq!(record.routing_calls, 1);
        assert_eq!(record.visited_states.first().map(String::as_str), Some("Init"));
        assert_eq!(record.visited_states.get(1).map(String::as_str), Some("ForestQuery"));
    }

    #[test]
    fn quake_script_bridges_the_toolless_initial_stage() {
        let world = world();
        let all = tasks(&world);
        let task = by_template(&all, "quake_damage");
        let config = AgentConfig::for_mode(AgentMode::Stateflow);
        let dir = tempfile::tempdir().unwrap();
        let (record, _) = run_with(&world, task, &config, &ScriptPlan::default(), dir.path());
        assert_eq!(record.status, RunStatus::Completed);
        // 7 gold calls plus one bridge turn per stage boundary.
        assert_eq!(record.turns, 13);
        assert_eq!(
            record.visited_states,
            ["Init", "Load", "Filter", "Detect", "Correlate", "PlotAnswer", "End"]
        );
    }

    #[test]
    fn identical_inputs_build_byte_identical_scripts() {
        let world = world();
        let reg = registry();
        let task = by_template(&tasks(&world), "vessel_count").clone();
        let spec = spec_for(&task);
        let config = AgentConfig::for_mode(AgentMode::Stateflow);
        let plan = ScriptPlan {
            fault_plan: Some(FaultPlan::new(0.5, 9, ["filter_temporal".to_string()])),
            premature_terminate_after: None,
        };
        let a = build_gold_script(&world, &spec, &reg, &task, &config, &plan).unwrap();
        let b = build_gold_script(&world, &spec, &reg, &task, &config, &plan).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
    }

    /// Finds a fault plan seed that actually trips the given task's
    /// in-scope call, so fault-path tests cannot pass vacuously.
    fn seed_that_faults(world: &World, task: &TaskSpec, rate: f64) -> (FaultPlan, RunRecord) {
        let config = AgentConfig::for_mode(AgentMode::Stateflow);
        for seed in 0..200 {
            let plan = ScriptPlan {
                fault_plan: Some(FaultPlan::new(rate, seed, ["filter_temporal".to_string()])),
                premature_terminate_after: None,
            };
            let dir = tempfile::tempdir().unwrap();
            let (record, _) = run_with(world, task, &config, &plan, dir.path());
            if !record.faults_injected.is_empty() {
                return (plan.fault_plan.unwrap(), record);
            }
        }
        panic!("no seed under 200 faults the task at rate {rate}");
    }

    #[test]
    fn faulted_stateflow_run_recovers_and_still_succeeds() {
        let world = world();
        let all = tasks(&world);
        let task = by_template(&all, "object_map");
        let (_plan, record) = seed_that_faults(&world, task, 0.35);
        assert_eq!(record.status, RunStatus::Completed);
        assert!(record.reflections >= 1);
        let ok_calls: Vec<ToolCall> = record
            .trajectory
            .iter()
            .filter(|e| e.status == ToolStatus::Ok)
            .map(|e| e.call.clone())
            .collect();
        let matched = match_trajectory(&task.gold_trajectory, &ok_calls);
        assert_eq!(matched.correctness, 1.0);
    }

    #[test]
    fn same_faulted_script_breaks_an_unguarded_run() {
        let world = world();
        let all = tasks(&world);
        let task = by_template(&all, "object_map");
        let (fault_plan, stateflow_record) = seed_that_faults(&world, task, 0.35);
        let sf_dir = tempfile::tempdir().unwrap();
        let sf_config = AgentConfig::for_mode(AgentMode::Stateflow);
        let plan = ScriptPlan { fault_plan: Some(fault_plan), premature_terminate_after: None };
        let (sf_record, _) = run_with(&world, task, &sf_config, &plan, sf_dir.path());
        assert!(success_check(task, &sf_record, sf_dir.path()));
        assert_eq!(sf_record.faults_injected, stateflow_record.faults_injected);

        // Same script, reflection disabled: the faulted filter is never
        // retried, the handle chain breaks, and the map never renders.
        let react_dir = tempfile::tempdir().unwrap();
        let react_config = AgentConfig::for_mode(AgentMode::React);
        let (react_record, _) = run_with(&world, task, &react_config, &plan, react_dir.path());
        assert_eq!(react_record.reflections, 0);
        assert!(!success_check(task, &react_record, react_dir.path()));

        // Error handling alone (no gating) recovers just like stateflow.
        let errtrm_dir = tempfile::tempdir().unwrap();
        let errtrm_config = AgentConfig::for_mode(AgentMode::ReactErrtrm);
        let (errtrm_record, _) = run_with(&world, task, &errtrm_config, &plan, errtrm_dir.path());
        assert!(errtrm_record.reflections >= 1);
        assert!(success_check(task, &errtrm_record, errtrm_dir.path()));
    }

    #[test]
    fn premature_terminate_is_retracted_under_validation_and_fatal_without() {
        let world = world();
        let all = tasks(&world);
        let task = by_template(&all, "quake_damage");
        let plan = ScriptPlan { fault_plan: None, premature_terminate_after: Some(2) };

        let validated_dir = tempfile::tempdir().unwrap();
        let validated_config = AgentConfig::for_mode(AgentMode::Stateflow);
        let (validated, _) = run_with(&world, task, &validated_config, &plan, validated_dir.path());
        assert_eq!(validated.status, RunStatus::Completed);
        assert_eq!(validated.terminate_validations, 1);
        assert!(success_check(task, &validated, validated_dir.path()));
        assert!(validated
            .turn_records
            .iter()
            .any(|t| t.note.as_deref() == Some("terminate retracted")));

        let face_dir = tempfile::tempdir().unwrap();
        let mut face_config = AgentConfig::for_mode(AgentMode::Stateflow);
        face_config.terminate_validation = false;
        let (face, _) = run_with(&world, task, &face_config, &plan, face_dir.path());
        assert_eq!(
            face.status,
            RunStatus::Aborted { reason: "TERMINATE without a recorded final answer".into() }
        );
        assert!(!success_check(task, &face, face_dir.path()));
        assert!(face.turns < validated.turns);
    }

    #[test]
    fn premature_terminate_position_must_precede_the_final_call() {
        let world = world();
        let reg = registry();
        let all = tasks(&world);
        let task = by_template(&all, "forest_loss_sum");
        let spec = spec_for(task);
        let config = AgentConfig::for_mode(AgentMode::Stateflow);
        let plan = ScriptPlan {
            fault_plan: None,
            premature_terminate_after: Some(task.gold_trajectory.len() - 1),
        };
        let err = build_gold_script(&world, &spec, &reg, task, &config, &plan).unwrap_err();
        assert!(err.to_string().contains("shorter prefix"));
    }
}
