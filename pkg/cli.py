"""
CLI for the Transactional Sandbox.

Operator commands: 'run', 'policy-check', 'journal', 'serve', 'bench',
'guidance', 'reset', 'recover' and 'register'.

Exit codes:
    0  EXECUTED_SAFE or COMMITTED (or success of an informational command)
    1  runtime error
    2  usage error
    3  BLOCKED
    4  ROLLED_BACK
    5  FATAL, or the workspace is quarantined
"""
import argparse
import json
import os
import shlex
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from config import get_config
from modules import (
    GUIDANCE,
    AgentService,
    ExecOptions,
    PolicyClass,
    ServiceConfig,
    TransactionManager,
    TransactionRecord,
    WorkspaceEntry,
    check_overhead_properties,
    classify,
    filter_entries,
    load_policy_file,
    load_scenarios,
    outcome_stats,
    parse_command,
    read_history,
    reports_frame,
    run_overhead_bench,
    run_safety_suite,
    serve,
)
from utils import SandboxError, configure_logging, default_store_dir
from utils.constants import (
    DEFAULT_OVERHEAD_SIZES_MB,
    EXIT_ERROR,
    EXIT_FATAL,
    EXIT_OK,
    EXIT_USAGE,
    JOURNAL_FILE,
    OUTCOME_EXIT_CODES,
)

_USAGE_CODES = {"EMPTY_COMMAND", "UNBALANCED_QUOTE", "POLICY_PARSE_ERROR", "DUPLICATE_RULE_ID", "INVALID_PATTERN"}

_OUTCOME_ICONS = {
    "EXECUTED_SAFE": "✅",
    "COMMITTED": "✅",
    "BLOCKED": "🛑",
    "ROLLED_BACK": "↩️ ",
    "FATAL": "💥",
}


@dataclass
class CliConfig:
    """Fully resolved CLI settings."""

    workspace_root: Path
    store_dir: Path
    policy_path: Path
    timeout_ms: int
    output_cap: int
    verbosity: str
    log_file: Optional[str] = None
    verify_digests: bool = True
    journal_max_bytes: int = 0
    config_path: Optional[Path] = None

    @classmethod
    def resolve(cls, args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> "CliConfig":
        """
        Merge defaults < config file < environment < command-line flags.

        Args:
            args: Parsed arguments.
            environ: Environment mapping (``os.environ`` when omitted).

        Returns:
            The resolved configuration.
        """
        env = os.environ if environ is None else environ
        defaults = get_config()
        file_data: Dict[str, Any] = {}
        config_path = Path(args.config) if getattr(args, "config", None) else None
        if config_path is not None:
            try:
                file_data = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
            except (OSError, yaml.YAMLError) as e:
                raise SandboxError("INVALID_CONFIG", f"cannot read config {config_path}: {e}")
            if not isinstance(file_data, dict):
                raise SandboxError("INVALID_CONFIG", f"{config_path} must hold a mapping")

        def pick(flag: Optional[Any], env_name: str, file_key: str, default: Any) -> Any:
            if flag is not None:
                return flag
            if env.get(env_name):
                return env[env_name]
            if file_data.get(file_key) is not None:
                return file_data[file_key]
            return default

        workspace = pick(
            getattr(args, "workspace", None), "SANDBOX_WORKSPACE", "workspace", defaults.WORKSPACE or os.getcwd()
        )
        workspace_root = Path(workspace).expanduser().resolve()
        store = pick(getattr(args, "store", None), "SANDBOX_STORE", "store", defaults.STORE or None)
        store_dir = Path(store).expanduser().resolve() if store else default_store_dir(workspace_root)

        verbose = getattr(args, "verbose", 0) or 0
        level = "DEBUG" if verbose else str(pick(None, "SANDBOX_LOG_LEVEL", "log_level", defaults.LOG_LEVEL))
        verify = pick(None, "SANDBOX_VERIFY_DIGESTS", "verify_digests", defaults.VERIFY_DIGESTS)
        if isinstance(verify, str):
            verify = verify.strip().lower() in ("1", "true", "yes", "on")

        return cls(
            workspace_root=workspace_root,
            store_dir=store_dir,
            policy_path=Path(pick(getattr(args, "policy", None), "SANDBOX_POLICY", "policy", defaults.POLICY)),
            timeout_ms=int(
                pick(getattr(args, "timeout_ms", None), "SANDBOX_TIMEOUT_MS", "timeout_ms", defaults.TIMEOUT_MS)
            ),
            output_cap=int(
                pick(getattr(args, "output_cap", None), "SANDBOX_OUTPUT_CAP", "output_cap", defaults.OUTPUT_CAP)
            ),
            verbosity=level,
            log_file=pick(None, "SANDBOX_LOG_FILE", "log_file", defaults.LOG_FILE or None),
            verify_digests=bool(verify),
            journal_max_bytes=int(
                pick(None, "SANDBOX_JOURNAL_MAX_BYTES", "journal_max_bytes", defaults.JOURNAL_MAX_BYTES)
            ),
            config_path=config_path,
        )


class SandboxCLI:
    """Command-line interface for the transactional sandbox."""

    def __init__(self):
        """Initialize the CLI."""
        self.parser = self._create_parser()
        self.json_mode = False

    @staticmethod
    def _add_global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
        default = argparse.SUPPRESS if suppress else None
        parser.add_argument("--workspace", "-w", default=default, help="Workspace root (default: current directory)")
        parser.add_argument(
            "--store", "-s", default=default, help="Snapshot and journal directory outside the workspace"
        )
        parser.add_argument("--policy", "-p", default=default, help="Policy YAML file")
        parser.add_argument("--config", "-c", default=default, help="YAML config file")
        parser.add_argument("--timeout-ms", type=int, default=default, help="Command timeout in milliseconds")
        parser.add_argument("--output-cap", type=int, default=default, help="Captured bytes per output stream")
        parser.add_argument(
            "--json",
            action="store_true",
            default=argparse.SUPPRESS if suppress else False,
            help="Emit one JSON document on stdout",
        )
        parser.add_argument(
            "--verbose",
            "-v",
            action="count",
            default=argparse.SUPPRESS if suppress else 0,
            help="Debug logging on stderr",
        )

    def _create_parser(self) -> argparse.ArgumentParser:
        """Create the argument parser."""
        parser = argparse.ArgumentParser(
            prog="txsandbox",
            description="Transactional sandbox for agent-issued shell commands",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  python cli.py --workspace proj run -- ls -la
  python cli.py policy-check "pip install x && rm -rf /"
  python cli.py --workspace proj journal --stats
  python cli.py serve --stdio --service-config service.yaml
  python cli.py bench safety --attempts 20
  python cli.py bench overhead --size-mb 10 --size-mb 50 --size-mb 100 --size-mb 250
            """,
        )
        self._add_global_options(parser, suppress=False)
        common = argparse.ArgumentParser(add_help=False)
        self._add_global_options(common, suppress=True)

        subparsers = parser.add_subparsers(dest="command", help="Command to execute")

        run_parser = subparsers.add_parser("run", parents=[common], help="Run one command as a transaction")
        run_parser.add_argument("argv", nargs=argparse.REMAINDER, help="Command (after --)")
        run_parser.add_argument(
            "--env", action="append", default=[], metavar="NAME=VALUE", help="Extra environment variable"
        )

        check_parser = subparsers.add_parser(
            "policy-check", parents=[common], help="Classify a command without running it"
        )
        check_parser.add_argument("argv", nargs=argparse.REMAINDER, help="Command text")

        journal_parser = subparsers.add_parser("journal", parents=[common], help="List journaled transactions")
        journal_parser.add_argument("--outcome", help="Only this outcome")
        journal_parser.add_argument("--since", help="Only transactions started at or after this ISO-8601 time")
        journal_parser.add_argument("--stats", action="store_true", help="Counts and mean timings per outcome")
        journal_parser.add_argument("--file", help="Journal file (default: <store>/journal.log)")

        serve_parser = subparsers.add_parser(
            "serve", parents=[common], help="Serve agent requests (newline-delimited JSON)"
        )
        transport = serve_parser.add_mutually_exclusive_group()
        transport.add_argument("--stdio", action="store_true", help="Requests on stdin, responses on stdout (default)")
        transport.add_argument("--socket", help="Listen on a Unix socket path")
        serve_parser.add_argument("--service-config", help="Service YAML with workspaces, policy and defaults")

        bench_parser = subparsers.add_parser(
            "bench", parents=[common], help="Run the safety suite or the overhead bench"
        )
        bench_sub = bench_parser.add_subparsers(dest="bench_command")
        safety_parser = bench_sub.add_parser("safety", parents=[common], help="Safety suite over the scenario fixtures")
        safety_parser.add_argument("--attempts", type=int, default=20, help="Attempts per category")
        safety_parser.add_argument("--scenarios", help="Scenario manifest directory")
        safety_parser.add_argument("--journal", help="Journal receiving every attempt")
        overhead_parser = bench_sub.add_parser(
            "overhead", parents=[common], help="Snapshot overhead over synthetic workspaces"
        )
        overhead_parser.add_argument(
            "--command", dest="bench_cmd", default="sh -c true", help="UNCERTAIN command to time"
        )
        overhead_parser.add_argument(
            "--size-mb",
            type=float,
            action="append",
            help="Workspace size in MiB (repeatable; default 10, 50, 100 and 250)",
        )
        overhead_parser.add_argument("--repetitions", type=int, default=10, help="Measured rounds per size")
        overhead_parser.add_argument("--file-count", type=int, default=2000, help="Files per workspace")
        overhead_parser.add_argument("--seed", type=int, default=1, help="Workspace generation seed")
        overhead_parser.add_argument("--check", action="store_true", help="Exit 1 when monotonicity or dominance fails")

        subparsers.add_parser("guidance", parents=[common], help="Print the sandbox guidance for agent prompts")

        reset_parser = subparsers.add_parser("reset", parents=[common], help="Clear a workspace quarantine")
        reset_parser.add_argument("--ack", required=True, help="Operator acknowledgment recorded in the journal")

        subparsers.add_parser("recover", parents=[common], help="Scan for orphaned snapshots and quarantine if found")

        register_parser = subparsers.add_parser(
            "register", parents=[common], help="Register a workspace alias in the service config"
        )
        register_parser.add_argument("alias", help="Workspace alias")
        register_parser.add_argument("root", help="Workspace root")
        register_parser.add_argument("--alias-store", help="Store directory for this workspace")
        register_parser.add_argument("--service-config", required=True, help="Service YAML receiving the alias")

        return parser

    def run(self, argv: Optional[List[str]] = None) -> int:
        """
        Run the CLI.

        Args:
            argv: Command line arguments. If None, uses sys.argv[1:].

        Returns:
            Exit code.
        """
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return EXIT_OK if e.code == 0 else EXIT_USAGE

        if not args.command:
            self.parser.print_help(sys.stderr)
            return EXIT_USAGE
        self.json_mode = bool(getattr(args, "json", False))

        try:
            cfg = CliConfig.resolve(args)
        except SandboxError as e:
            self._fail(e)
            return EXIT_USAGE
        configure_logging(cfg.verbosity, cfg.log_file)

        handlers = {
            "run": self.cmd_run,
            "policy-check": self.cmd_policy_check,
            "journal": self.cmd_journal,
            "serve": self.cmd_serve,
            "bench": self.cmd_bench,
            "guidance": self.cmd_guidance,
            "reset": self.cmd_reset,
            "recover": self.cmd_recover,
            "register": self.cmd_register,
        }
        try:
            return handlers[args.command](args, cfg)
        except SandboxError as e:
            self._fail(e)
            if e.code in _USAGE_CODES:
                return EXIT_USAGE
            if e.code == "WORKSPACE_QUARANTINED":
                return EXIT_FATAL
            return EXIT_ERROR
        except Exception as e:
            print(f"❌ Error: {str(e)}", file=sys.stderr)
            return EXIT_ERROR

    # ------------------------------------------------------------------
    # Output helpers
    # ------------------------------------------------------------------

    def _say(self, text: str = "") -> None:
        """Human text: stdout normally, stderr when stdout carries JSON."""
        print(text, file=sys.stderr if self.json_mode else sys.stdout)

    def _emit(self, document: Any) -> None:
        sys.stdout.write(json.dumps(document, indent=2, default=str) + "\n")
        sys.stdout.flush()

    def _fail(self, error: SandboxError) -> None:
        if self.json_mode:
            self._emit({"error": error.to_dict()})
        print(f"❌ {error}", file=sys.stderr)

    @staticmethod
    def _command_text(argv: List[str]) -> str:
        if argv and argv[0] == "--":
            argv = argv[1:]
        if len(argv) == 1:
            return argv[0]
        return shlex.join(argv)

    def _manager(self, cfg: CliConfig) -> TransactionManager:
        return TransactionManager(
            policy=load_policy_file(cfg.policy_path),
            verify_digests=cfg.verify_digests,
            default_timeout_ms=cfg.timeout_ms,
            default_output_cap=cfg.output_cap,
            journal_max_bytes=cfg.journal_max_bytes,
        )

    # ------------------------------------------------------------------
    # Commands
    # ------------------------------------------------------------------

    def cmd_run(self, args: argparse.Namespace, cfg: CliConfig) -> int:
        """Execute the run command."""
        raw = self._command_text(args.argv)
        if not raw.strip():
            print("❌ run needs a command, e.g. run -- ls -la", file=sys.stderr)
            return EXIT_USAGE

        env: Dict[str, str] = {}
        for item in args.env:
            name, sep, value = item.partition("=")
            if not sep or not name:
                print(f"❌ --env expects NAME=VALUE, got {item!r}", file=sys.stderr)
                return EXIT_USAGE
            env[name] = value

        manager = self._manager(cfg)
        ws = manager.open_workspace(cfg.workspace_root, cfg.store_dir)
        record = manager.run_transaction(ws, raw, exec_opts=ExecOptions(env=env))
        self._report_record(record)
        return OUTCOME_EXIT_CODES[record.outcome.value]

    def _report_record(self, record: TransactionRecord) -> None:
        execution = record.execution
        if self.json_mode:
            document = record.to_dict()
            if execution is not None:
                document["stdout"] = execution.stdout.decode("utf-8", errors="replace")
                document["stderr"] = execution.stderr.decode("utf-8", errors="replace")
            self._emit(document)
        elif execution is not None:
            sys.stdout.write(execution.stdout.decode("utf-8", errors="replace"))
            sys.stderr.write(execution.stderr.decode("utf-8", errors="replace"))

        icon = _OUTCOME_ICONS.get(record.outcome.value, "ℹ️ ")
        policy_class = record.decision.policy_class.value if record.decision else "-"
        lines = [f"{icon} {record.outcome.value} ({policy_class}) txn {record.txn_id}"]
        if execution is not None:
            lines.append(
                f"   ⏱️  {execution.describe()} in {record.timings.total_ms:.1f} ms "
                f"(snapshot {record.timings.snapshot_ms:.1f} ms)"
            )
        if record.error is not None:
            lines.append(f"   {record.error.message}")
        if record.pre_digest and record.post_digest:
            same = "unchanged" if record.pre_digest.value == record.post_digest.value else "changed"
            lines.append(f"   🔐 workspace {same} ({record.post_digest.value[:12]})")
        print("\n".join(lines), file=sys.stderr)

    def cmd_policy_check(self, args: argparse.Namespace, cfg: CliConfig) -> int:
        """Execute the policy-check command."""
        raw = self._command_text(args.argv)
        policy = load_policy_file(cfg.policy_path)
        cmd = parse_command(raw)
        decision = classify(cmd, policy, workspace_root=cfg.workspace_root)

        if self.json_mode:
            self._emit(
                {
                    "command": cmd.raw,
                    "policy_version": policy.version,
                    "warnings": list(cmd.parse_warnings),
                    **decision.to_dict(),
                },
            )
            return EXIT_OK

        self._say(decision.policy_class.value)
        for seg_decision, segment in zip(decision.per_segment, cmd.segments):
            rule = seg_decision.rule_id or "-"
            self._say(f"  [{seg_decision.index}] {seg_decision.policy_class.value:<9} {rule:<22} {segment.render()}")
            for reason in seg_decision.reasons:
                self._say(f"        ℹ️  {reason}")
        if decision.policy_class is PolicyClass.UNSAFE:
            self._say(f"🛑 blocked by: {', '.join(decision.blacklist_rule_ids)}")
        return EXIT_OK

    def cmd_journal(self, args: argparse.Namespace, cfg: CliConfig) -> int:
        """Execute the journal command."""
        path = Path(args.file) if args.file else cfg.store_dir / JOURNAL_FILE
        if not path.exists():
            print(f"❌ No journal at {path}", file=sys.stderr)
            return EXIT_USAGE

        since = None
        if args.since:
            try:
                since = datetime.fromisoformat(args.since)
            except ValueError:
                print(f"❌ --since expects an ISO-8601 time, got {args.since!r}", file=sys.stderr)
                return EXIT_USAGE
            if since.tzinfo is None:
                since = since.replace(tzinfo=timezone.utc)

        history = read_history(path)
        for warning in history.warnings:
            print(f"⚠️  {warning}", file=sys.stderr)
        entries = history.entries
        if args.outcome or since:
            entries = [e for e in entries if e.record.get("kind", "TRANSACTION") == "TRANSACTION"]
            entries = filter_entries(entries, args.outcome, since)

        if args.stats:
            stats = outcome_stats(entries)
            if self.json_mode:
                self._emit(
                    {"entries": len(entries), "outcomes": json.loads(stats.reset_index().to_json(orient="records"))}
                )
            else:
                self._say(f"📊 {len(entries)} entries")
                self._say(stats.to_string() if not stats.empty else "(no transactions)")
            return EXIT_OK

        if self.json_mode:
            self._emit({"count": len(entries), "entries": [{"seq": e.seq, "record": e.record} for e in entries]})
            return EXIT_OK

        self._say(f"{len(entries)} entries")
        for entry in entries:
            record = entry.record
            kind = record.get("kind", "TRANSACTION")
            if kind != "TRANSACTION":
                self._say(f"{entry.seq:>6}  {record.get('at', ''):<32} {kind}")
                continue
            icon = _OUTCOME_ICONS.get(record.get("outcome", ""), "ℹ️ ")
            self._say(
                f"{entry.seq:>6}  {record.get('started_at', ''):<32} {icon} "
                f"{record.get('outcome', ''):<13} {record.get('command_raw', '')}"
            )
        return EXIT_OK

    def cmd_serve(self, args: argparse.Namespace, cfg: CliConfig) -> int:
        """Execute the serve command."""
        if args.service_config:
            config = ServiceConfig.load(args.service_config)
        else:
            config = ServiceConfig(
                timeout_ms=cfg.timeout_ms,
                output_cap=cfg.output_cap,
                queue_depth=get_config().QUEUE_DEPTH,
            )
        if config.policy is None:
            config.policy = str(cfg.policy_path)
        if not config.workspaces:
            config.workspaces["default"] = WorkspaceEntry(str(cfg.workspace_root), str(cfg.store_dir))

        transport = args.socket or "stdio"
        print(f"🚀 Serving {len(config.workspaces)} workspace(s) on {transport}", file=sys.stderr)
        answered = serve(transport, config)
        print(f"✅ Answered {answered} request(s)", file=sys.stderr)
        return EXIT_OK

    def cmd_bench(self, args: argparse.Namespace, cfg: CliConfig) -> int:
        """Execute the bench command."""
        policy = load_policy_file(cfg.policy_path)
        if args.bench_command == "safety":
            scenarios = load_scenarios(args.scenarios) if args.scenarios else load_scenarios()
            self._say(f"🧪 Safety suite: {len(scenarios)} scenarios, {args.attempts} attempts per category")
            report = run_safety_suite(policy, args.attempts, scenarios, args.journal)
            if self.json_mode:
                self._emit(report.to_dict())
            else:
                self._say(report.to_frame().to_string(index=False))
                for failure in report.failures:
                    self._say(f"❌ {failure.scenario}: {failure.reason}")
            self._say("✅ All categories passed" if report.passed else "❌ Safety suite had failures")
            return EXIT_OK if report.passed else EXIT_ERROR

        if args.bench_command == "overhead":
            sizes = [int(mb * 1024 * 1024) for mb in (args.size_mb or list(DEFAULT_OVERHEAD_SIZES_MB))]
            self._say(
                f"⏱️  Overhead bench: {args.bench_cmd!r} over {len(sizes)} size(s), {args.repetitions} repetitions"
            )
            reports = run_overhead_bench(args.bench_cmd, sizes, args.repetitions, policy, args.file_count, args.seed)
            violations = check_overhead_properties(reports)
            if self.json_mode:
                self._emit({"reports": [r.to_dict() for r in reports], "violations": violations})
            else:
                self._say(reports_frame(reports).to_string(index=False))
                for violation in violations:
                    self._say(f"⚠️  {violation}")
            return EXIT_ERROR if args.check and violations else EXIT_OK

        print("❌ bench needs 'safety' or 'overhead'", file=sys.stderr)
        return EXIT_USAGE

    def cmd_guidance(self, args: argparse.Namespace, cfg: CliConfig) -> int:
        """Execute the guidance command."""
        if self.json_mode:
            self._emit({"guidance": GUIDANCE})
        else:
            self._say(GUIDANCE)
        return EXIT_OK

    def cmd_reset(self, args: argparse.Namespace, cfg: CliConfig) -> int:
        """Execute the reset command."""
        manager = self._manager(cfg)
        ws = manager.open_workspace(cfg.workspace_root, cfg.store_dir)
        manager.reset_quarantine(ws, args.ack)
        if self.json_mode:
            self._emit({"workspace": str(ws.root), "quarantined": False})
        self._say(f"✅ Quarantine cleared for {ws.root}")
        return EXIT_OK

    def cmd_recover(self, args: argparse.Namespace, cfg: CliConfig) -> int:
        """Execute the recover command."""
        manager = self._manager(cfg)
        ws = manager.open_workspace(cfg.workspace_root, cfg.store_dir)
        orphans = manager.recover(ws)
        if self.json_mode:
            self._emit(
                {
                    "workspace": str(ws.root),
                    "orphaned_snapshots": [p.name for p in orphans],
                    "quarantined": ws.quarantined,
                },
            )
        if ws.quarantined:
            reason = ws.quarantine_reason() or {}
            self._say(f"💥 {ws.root} is quarantined: {reason.get('reason', 'unknown reason')}")
            return EXIT_FATAL
        self._say(f"✅ {ws.root} is clean")
        return EXIT_OK

    def cmd_register(self, args: argparse.Namespace, cfg: CliConfig) -> int:
        """Execute the register command."""
        path = Path(args.service_config)
        config = ServiceConfig.load(path) if path.exists() else ServiceConfig(path=path)
        service = AgentService(config, manager=self._manager(cfg))
        service.register_workspace(args.alias, args.root, args.alias_store)
        if self.json_mode:
            self._emit({"alias": args.alias, **asdict(config.workspaces[args.alias])})
        self._say(f"✅ Registered {args.alias} -> {config.workspaces[args.alias].root}")
        return EXIT_OK


def main() -> int:
    """Main entry point."""
    cli = SandboxCLI()
    return cli.run()


if __name__ == "__main__":
    sys.exit(main())
