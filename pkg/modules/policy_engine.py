"""
Policy Engine Module.

Parses agent-issued command strings into segments and classifies each
command as SAFE, UNSAFE or UNCERTAIN against an ordered rule set.

Classification rules:
    - Each segment is classified on its own: the first matching blacklist rule
      makes it UNSAFE, otherwise the first matching whitelist rule makes it
      SAFE, otherwise it is UNCERTAIN.
    - Segments with parse warnings or write redirections are at least UNCERTAIN.
    - The command's class is the most severe segment class.
"""
import fnmatch
import os
import re
import shlex
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Pattern, Tuple, Union

import yaml

from utils.constants import DEFAULT_POLICY_PATH
from utils.errors import PolicyError
from utils.logger import get_logger

logger = get_logger(__name__)


class Connector(Enum):
    """Operator joining a segment to the next one."""

    AND = "&&"
    OR = "||"
    SEQ = ";"
    PIPE = "|"
    NONE = ""


class RedirectKind(Enum):
    """Supported redirection kinds."""

    STDOUT_TRUNC = ">"
    STDOUT_APPEND = ">>"
    STDIN = "<"


class RuleClass(Enum):
    """Rule list a policy rule belongs to."""

    WHITELIST = "whitelist"
    BLACKLIST = "blacklist"


class MatchKind(Enum):
    """How a rule pattern is matched."""

    PROGRAM = "program"
    PREFIX = "prefix"
    GLOB = "glob"
    REGEX = "regex"


class PolicyClass(Enum):
    """Safety class of a segment or command."""

    SAFE = "SAFE"
    UNCERTAIN = "UNCERTAIN"
    UNSAFE = "UNSAFE"

    @property
    def severity(self) -> int:
        """Ordering used for max-severity aggregation."""
        return _SEVERITY[self]


_SEVERITY = {PolicyClass.SAFE: 0, PolicyClass.UNCERTAIN: 1, PolicyClass.UNSAFE: 2}
_ASSIGNMENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*=")

# Blacklist rules also see arguments naming the workspace root (or a directory above it) as this token.
WORKSPACE_ROOT_TOKEN = "$WORKSPACE_ROOT"


def mark_workspace_root(word: str, workspace_root: Optional[Union[str, Path]]) -> str:
    """
    Replace a path argument that resolves to the workspace root or one of its
    ancestors with ``$WORKSPACE_ROOT`` (keeping a trailing ``/*``).

    Relative paths are resolved against the workspace root, both lexically and
    through symlinks. Flags, words with expansions and paths inside the
    workspace are returned unchanged.
    """
    if workspace_root is None or not word or word.startswith("-") or any(c in word for c in "$`~"):
        return word
    base, suffix = word, ""
    if word.endswith("/*"):
        base, suffix = word[:-2] or "/", "/*"
    root = os.path.normpath(str(workspace_root))
    roots = {root, os.path.realpath(root)}
    joined = os.path.join(root, base)
    for target in {os.path.normpath(joined), os.path.realpath(joined)}:
        if target == "/" or any(target == r or r.startswith(target + "/") for r in roots):
            return WORKSPACE_ROOT_TOKEN + suffix
    return word


@dataclass(frozen=True)
class Redirection:
    """A redirection attached to a segment."""

    kind: RedirectKind
    target: str


@dataclass(frozen=True)
class Segment:
    """A simple command inside a compound command line."""

    argv: Tuple[str, ...]
    connector_to_next: Connector = Connector.NONE
    redirections: Tuple[Redirection, ...] = ()
    warnings: Tuple[str, ...] = ()

    @property
    def command_words(self) -> Tuple[str, ...]:
        """argv without leading ``NAME=value`` assignments."""
        for i, word in enumerate(self.argv):
            if not _ASSIGNMENT.match(word):
                return self.argv[i:]
        return self.argv

    @property
    def program(self) -> str:
        """The program name with directory components stripped."""
        name = self.command_words[0]
        return os.path.basename(name) or name

    @property
    def match_text(self) -> str:
        """Text matched by PREFIX, GLOB and REGEX rules."""
        return self.match_text_for(None)

    def match_text_for(self, workspace_root: Optional[Union[str, Path]]) -> str:
        """Match text with arguments naming the workspace root (or above) marked."""
        args = tuple(mark_workspace_root(word, workspace_root) for word in self.command_words[1:])
        return " ".join((self.program,) + args)

    @property
    def writes_files(self) -> bool:
        """True when the segment redirects output into a file."""
        return any(r.kind is not RedirectKind.STDIN for r in self.redirections)

    def render(self) -> str:
        """Render the segment back to shell text."""
        parts = [shlex.quote(arg) for arg in self.argv]
        for redirection in self.redirections:
            parts.append(f"{redirection.kind.value} {shlex.quote(redirection.target)}")
        return " ".join(parts)


@dataclass(frozen=True)
class CommandLine:
    """A parsed agent command."""

    raw: str
    segments: Tuple[Segment, ...]
    parse_warnings: Tuple[str, ...] = ()

    def render(self) -> str:
        """Re-serialize the segments with their connectors."""
        pieces: List[str] = []
        for segment in self.segments:
            pieces.append(segment.render())
            if segment.connector_to_next is not Connector.NONE:
                pieces.append(segment.connector_to_next.value)
        return " ".join(pieces)


@dataclass(frozen=True)
class PolicyRule:
    """One whitelist or blacklist rule."""

    id: str
    rule_class: RuleClass
    match_kind: MatchKind
    pattern: str
    description: str = ""
    _regex: Optional[Pattern[str]] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.pattern.strip():
            raise PolicyError("INVALID_PATTERN", f"rule {self.id!r} has an empty pattern", {"rule_id": self.id})
        if self.match_kind is MatchKind.REGEX:
            try:
                object.__setattr__(self, "_regex", re.compile(self.pattern))
            except re.error as e:
                raise PolicyError(
                    "INVALID_PATTERN",
                    f"rule {self.id!r}: {e}",
                    {"rule_id": self.id, "pattern": self.pattern},
                )
        elif self.match_kind is MatchKind.PROGRAM and "/" in self.pattern:
            raise PolicyError(
                "INVALID_PATTERN",
                f"rule {self.id!r}: program patterns name a program, not a path",
                {"rule_id": self.id, "pattern": self.pattern},
            )

    def matches(self, segment: Segment, text: Optional[str] = None) -> bool:
        """Check whether this rule matches a segment (``text`` overrides its match text)."""
        if self.match_kind is MatchKind.PROGRAM:
            return segment.program == self.pattern
        if text is None:
            text = segment.match_text
        if self.match_kind is MatchKind.PREFIX:
            prefix = self.pattern.strip()
            return text == prefix or text.startswith(prefix + " ")
        if self.match_kind is MatchKind.GLOB:
            return fnmatch.fnmatchcase(text, self.pattern)
        assert self._regex is not None
        return self._regex.search(text) is not None

    def to_dict(self) -> Dict[str, str]:
        """Return the rule in policy-file form."""
        return {
            "id": self.id,
            "class": self.rule_class.value,
            "match": self.match_kind.value,
            "pattern": self.pattern,
            "description": self.description,
        }


@dataclass(frozen=True)
class PolicySet:
    """An ordered, immutable rule set."""

    rules: Tuple[PolicyRule, ...]
    version: str = "1"

    def __post_init__(self) -> None:
        seen = set()
        for rule in self.rules:
            if rule.id in seen:
                raise PolicyError("DUPLICATE_RULE_ID", f"rule id {rule.id!r} is used twice", {"rule_id": rule.id})
            seen.add(rule.id)

    def rules_of(self, rule_class: RuleClass) -> List[PolicyRule]:
        """Rules of one class in file order."""
        return [r for r in self.rules if r.rule_class is rule_class]


@dataclass(frozen=True)
class SegmentDecision:
    """Classification of one segment."""

    index: int
    policy_class: PolicyClass
    rule_id: Optional[str]
    reasons: Tuple[str, ...] = ()


@dataclass(frozen=True)
class PolicyDecision:
    """Classification of a whole command."""

    policy_class: PolicyClass
    matched_rule_ids: Tuple[str, ...]
    per_segment: Tuple[SegmentDecision, ...]

    @property
    def blacklist_rule_ids(self) -> List[str]:
        """Rule ids of the segments that were blocked."""
        return [d.rule_id for d in self.per_segment if d.policy_class is PolicyClass.UNSAFE and d.rule_id]

    def to_dict(self) -> Dict[str, Any]:
        """Serialize the decision."""
        return {
            "class": self.policy_class.value,
            "matched_rule_ids": list(self.matched_rule_ids),
            "per_segment": [
                {
                    "index": d.index,
                    "class": d.policy_class.value,
                    "rule_id": d.rule_id,
                    "reasons": list(d.reasons),
                }
                for d in self.per_segment
            ],
        }


class CommandParser:
    """
    Hand-written tokenizer for the supported shell subset.

    Splits on ``&&``, ``||``, ``;`` and ``|``; understands single quotes,
    double quotes, backslash escapes and the ``>``, ``>>``, ``<`` redirections.
    Constructs outside that subset are kept as literal text and flagged with a
    warning on the segment that contains them.
    """

    def __init__(self, raw: str):
        """
        Initialize the parser.

        Args:
            raw: The command text.
        """
        self.raw = raw
        self.pos = 0
        self.segments: List[Segment] = []
        self._reset_segment()

    def _reset_segment(self) -> None:
        self.argv: List[str] = []
        self.redirections: List[Redirection] = []
        self.warnings: List[str] = []
        self.word: List[str] = []
        self.word_started = False
        self.pending_redirect: Optional[RedirectKind] = None

    def parse(self) -> CommandLine:
        """
        Parse the command.

        Returns:
            The parsed CommandLine.

        Raises:
            PolicyError: EMPTY_COMMAND or UNBALANCED_QUOTE.
        """
        if not self.raw or not self.raw.strip():
            raise PolicyError("EMPTY_COMMAND", "command is empty")

        text = self.raw
        while self.pos < len(text):
            ch = text[self.pos]
            nxt = text[self.pos + 1] if self.pos + 1 < len(text) else ""

            if ch in " \t\n":
                if ch == "\n":
                    self._end_segment(Connector.SEQ)
                else:
                    self._end_word()
                self.pos += 1
            elif ch == "\\" and nxt == "\n":
                self.pos += 2
            elif ch == "\\":
                self._start_word()
                if nxt:
                    self.word.append(nxt)
                    self.pos += 2
                else:
                    self.word.append("\\")
                    self.pos += 1
            elif ch == "'":
                self._read_single_quoted()
            elif ch == '"':
                self._read_double_quoted()
            elif ch == "`":
                self._warn("backtick command substitution")
                self._read_backticks()
            elif ch == "$":
                self._read_dollar(nxt)
            elif ch == "&":
                if nxt == "&":
                    self._end_segment(Connector.AND)
                    self.pos += 2
                elif nxt == ">":
                    self._warn("unsupported redirection '&>'")
                    self.pos += 1
                    self._read_redirect()
                else:
                    self._warn("background execution '&'")
                    self._end_segment(Connector.SEQ)
                    self.pos += 1
            elif ch == "|":
                if nxt == "|":
                    self._end_segment(Connector.OR)
                    self.pos += 2
                else:
                    self._end_segment(Connector.PIPE)
                    self.pos += 1
            elif ch == ";":
                self._end_segment(Connector.SEQ)
                self.pos += 1
            elif ch in "<>":
                self._read_redirect()
            elif ch in "()" and not self.word_started:
                self._warn("subshell or grouping")
                self._start_word()
                self.word.append(ch)
                self.pos += 1
            else:
                self._start_word()
                self.word.append(ch)
                self.pos += 1

        self._end_segment(Connector.NONE)

        if not self.segments:
            raise PolicyError("EMPTY_COMMAND", "command contains no simple commands", {"raw": self.raw})

        last = self.segments[-1]
        if last.connector_to_next is not Connector.NONE:
            warnings = last.warnings
            if last.connector_to_next is not Connector.SEQ:
                warnings = warnings + (f"dangling connector '{last.connector_to_next.value}'",)
            self.segments[-1] = Segment(last.argv, Connector.NONE, last.redirections, warnings)

        parse_warnings = tuple(
            f"segment {i}: {warning}" for i, seg in enumerate(self.segments) for warning in seg.warnings
        )
        return CommandLine(raw=self.raw, segments=tuple(self.segments), parse_warnings=parse_warnings)

    def _warn(self, message: str) -> None:
        if message not in self.warnings:
            self.warnings.append(message)

    def _start_word(self) -> None:
        self.word_started = True

    def _end_word(self) -> None:
        if not self.word_started:
            return
        value = "".join(self.word)
        if self.pending_redirect is not None:
            self.redirections.append(Redirection(self.pending_redirect, value))
            self.pending_redirect = None
        else:
            self.argv.append(value)
        self.word = []
        self.word_started = False

    def _end_segment(self, connector: Connector) -> None:
        self._end_word()
        if self.pending_redirect is not None:
            self._warn("redirection without a target")
            self.pending_redirect = None

        if not self.argv:
            if self.redirections:
                # A bare redirection still truncates or creates its target.
                self.argv = [":"]
                self._warn("redirection without a command")
            elif connector is Connector.NONE and not self.warnings:
                self._reset_segment()
                return
            elif self.segments:
                prev = self.segments[-1]
                extra = tuple(w for w in self.warnings if w not in prev.warnings)
                if connector is not Connector.SEQ or prev.connector_to_next is not Connector.SEQ:
                    extra = extra + ("empty command between connectors",)
                if connector is Connector.NONE:
                    connector = prev.connector_to_next
                self.segments[-1] = Segment(prev.argv, connector, prev.redirections, prev.warnings + extra)
                self._reset_segment()
                return
            else:
                carried = list(self.warnings)
                if connector not in (Connector.SEQ, Connector.NONE):
                    carried.append(f"leading connector '{connector.value}'")
                self._reset_segment()
                self.warnings = carried
                return

        if _ASSIGNMENT.match(self.argv[0]):
            self._warn("environment assignment prefix")

        self.segments.append(
            Segment(
                argv=tuple(self.argv),
                connector_to_next=connector,
                redirections=tuple(self.redirections),
                warnings=tuple(self.warnings),
            )
        )
        self._reset_segment()

    def _read_single_quoted(self) -> None:
        end = self.raw.find("'", self.pos + 1)
        if end == -1:
            raise PolicyError("UNBALANCED_QUOTE", "single quote is never closed", {"position": self.pos})
        self._start_word()
        self.word.append(self.raw[self.pos + 1:end])
        self.pos = end + 1

    def _read_double_quoted(self) -> None:
        start = self.pos
        self._start_word()
        self.pos += 1
        while self.pos < len(self.raw):
            ch = self.raw[self.pos]
            if ch == '"':
                self.pos += 1
                return
            if ch == "\\" and self.pos + 1 < len(self.raw) and self.raw[self.pos + 1] in '"\\$`\n':
                if self.raw[self.pos + 1] != "\n":
                    self.word.append(self.raw[self.pos + 1])
                self.pos += 2
                continue
            if ch == "$" and self.pos + 1 < len(self.raw):
                follower = self.raw[self.pos + 1]
                if follower == "(":
                    self._warn("command substitution '$(...)'")
                elif follower == "{" or follower.isalnum() or follower in "_@*#?$!-":
                    self._warn("variable expansion")
            elif ch == "`":
                self._warn("backtick command substitution")
            self.word.append(ch)
            self.pos += 1
        raise PolicyError("UNBALANCED_QUOTE", "double quote is never closed", {"position": start})

    def _read_backticks(self) -> None:
        end = self.raw.find("`", self.pos + 1)
        if end == -1:
            raise PolicyError("UNBALANCED_QUOTE", "backtick is never closed", {"position": self.pos})
        self._start_word()
        self.word.append(self.raw[self.pos:end + 1])
        self.pos = end + 1

    def _read_dollar(self, nxt: str) -> None:
        self._start_word()
        if nxt == "(":
            self._warn("command substitution '$(...)'")
            depth = 0
            start = self.pos
            while self.pos < len(self.raw):
                ch = self.raw[self.pos]
                if ch == "(":
                    depth += 1
                elif ch == ")":
                    depth -= 1
                    if depth == 0:
                        self.pos += 1
                        break
                self.pos += 1
            else:
                raise PolicyError("UNBALANCED_QUOTE", "command substitution is never closed", {"position": start})
            self.word.append(self.raw[start:self.pos])
            return
        if nxt == "{" or nxt.isalnum() or (nxt and nxt in "_@*#?$!-"):
            self._warn("variable expansion")
        self.word.append("$")
        self.pos += 1

    def _read_redirect(self) -> None:
        if self.word_started and self.word and "".join(self.word).isdigit():
            self._warn("file-descriptor redirection")
            self.word = []
            self.word_started = False
        else:
            self._end_word()

        ch = self.raw[self.pos]
        nxt = self.raw[self.pos + 1] if self.pos + 1 < len(self.raw) else ""
        if ch == ">":
            if nxt == ">":
                kind = RedirectKind.STDOUT_APPEND
                self.pos += 2
            else:
                kind = RedirectKind.STDOUT_TRUNC
                self.pos += 1
                if nxt == "|":
                    self.pos += 1
        else:
            kind = RedirectKind.STDIN
            if nxt == "<":
                self._warn("heredoc")
                self.pos += 2
                if self.pos < len(self.raw) and self.raw[self.pos] == "<":
                    self.pos += 1
            else:
                self.pos += 1

        if self.pos < len(self.raw) and self.raw[self.pos] == "&":
            self._warn("file-descriptor duplication")
            self.pos += 1
        if self.pending_redirect is not None:
            self._warn("redirection without a target")
        self.pending_redirect = kind


class PolicyEngine:
    """Classify parsed commands against a PolicySet."""

    def __init__(self, policy: PolicySet, workspace_root: Optional[Union[str, Path]] = None):
        """
        Initialize the engine.

        Args:
            policy: The loaded rule set.
            workspace_root: Workspace the command will run in; enables ``$WORKSPACE_ROOT`` matching.
        """
        self.policy = policy
        self.workspace_root = workspace_root
        self._blacklist = policy.rules_of(RuleClass.BLACKLIST)
        self._whitelist = policy.rules_of(RuleClass.WHITELIST)

    def classify_segment(self, index: int, segment: Segment) -> SegmentDecision:
        """Classify a single segment."""
        # blacklist rules see both spellings, whitelist rules only the literal one
        texts = (segment.match_text, segment.match_text_for(self.workspace_root))
        for rule in self._blacklist:
            if any(rule.matches(segment, text) for text in texts):
                return SegmentDecision(index, PolicyClass.UNSAFE, rule.id, (f"blacklisted by {rule.id}",))

        whitelist_rule = next((rule for rule in self._whitelist if rule.matches(segment)), None)
        reasons: List[str] = []
        if segment.warnings:
            reasons.extend(segment.warnings)
        if segment.writes_files:
            reasons.append("writes a file through redirection")

        if whitelist_rule is None:
            reasons.insert(0, "no rule matched")
            return SegmentDecision(index, PolicyClass.UNCERTAIN, None, tuple(reasons))
        if reasons:
            return SegmentDecision(index, PolicyClass.UNCERTAIN, whitelist_rule.id, tuple(reasons))
        return SegmentDecision(index, PolicyClass.SAFE, whitelist_rule.id, (f"whitelisted by {whitelist_rule.id}",))

    def classify(self, cmd: CommandLine) -> PolicyDecision:
        """
        Classify a command line.

        Args:
            cmd: A successfully parsed command.

        Returns:
            PolicyDecision whose class is the maximum segment severity.
        """
        per_segment = tuple(self.classify_segment(i, seg) for i, seg in enumerate(cmd.segments))
        overall = max((d.policy_class for d in per_segment), key=lambda c: c.severity)

        matched: List[str] = []
        for decision in per_segment:
            if decision.rule_id and decision.rule_id not in matched:
                matched.append(decision.rule_id)

        logger.debug("classified %r as %s (rules=%s)", cmd.raw, overall.value, matched)
        return PolicyDecision(policy_class=overall, matched_rule_ids=tuple(matched), per_segment=per_segment)


def parse_command(raw: str) -> CommandLine:
    """Parse raw command text into a CommandLine."""
    return CommandParser(raw).parse()


def classify(
    cmd: CommandLine, policy: PolicySet, workspace_root: Optional[Union[str, Path]] = None
) -> PolicyDecision:
    """Classify a parsed command against a policy, optionally for a given workspace."""
    return PolicyEngine(policy, workspace_root).classify(cmd)


def _rule_lines(source: str) -> List[int]:
    """Line numbers (1-based) of each entry of the ``rules`` sequence."""
    try:
        node = yaml.compose(source)
    except yaml.YAMLError:
        return []
    if not isinstance(node, yaml.MappingNode):
        return []
    for key, value in node.value:
        if getattr(key, "value", None) == "rules" and isinstance(value, yaml.SequenceNode):
            return [item.start_mark.line + 1 for item in value.value]
    return []


def _parse_error(message: str, line: Optional[int] = None, column: Optional[int] = None) -> PolicyError:
    detail: Dict[str, Any] = {}
    location = ""
    if line is not None:
        detail["line"] = line
        location = f"line {line}"
        if column is not None:
            detail["column"] = column
            location += f", column {column}"
        location = f" ({location})"
    return PolicyError("POLICY_PARSE_ERROR", f"{message}{location}", detail)


def load_policy(source: str) -> PolicySet:
    """
    Load and validate a policy document.

    Args:
        source: UTF-8 YAML text with ``version`` and an ordered ``rules`` list.

    Returns:
        The validated PolicySet, rules in file order.

    Raises:
        PolicyError: POLICY_PARSE_ERROR, DUPLICATE_RULE_ID or INVALID_PATTERN.
    """
    try:
        document = yaml.safe_load(source)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        if mark is not None:
            raise _parse_error(f"invalid policy document: {getattr(e, 'problem', e)}", mark.line + 1, mark.column + 1)
        raise _parse_error(f"invalid policy document: {e}")

    if not isinstance(document, dict):
        raise _parse_error("policy document must be a mapping with 'version' and 'rules'", 1)
    if "version" not in document:
        raise _parse_error("policy document is missing 'version'", 1)
    raw_rules = document.get("rules", [])
    if raw_rules is None:
        raw_rules = []
    if not isinstance(raw_rules, list):
        raise _parse_error("'rules' must be a list", 1)

    lines = _rule_lines(source)
    rules: List[PolicyRule] = []
    for i, entry in enumerate(raw_rules):
        line = lines[i] if i < len(lines) else None
        if not isinstance(entry, dict):
            raise _parse_error(f"rule #{i + 1} must be a mapping", line)
        missing = [key for key in ("id", "class", "match", "pattern") if key not in entry]
        if missing:
            raise _parse_error(f"rule #{i + 1} is missing {', '.join(missing)}", line)
        try:
            rule_class = RuleClass(str(entry["class"]).lower())
        except ValueError:
            raise _parse_error(f"rule #{i + 1}: class must be 'whitelist' or 'blacklist'", line)
        try:
            match_kind = MatchKind(str(entry["match"]).lower())
        except ValueError:
            raise _parse_error(f"rule #{i + 1}: match must be program, prefix, glob or regex", line)

        try:
            rule = PolicyRule(
                id=str(entry["id"]),
                rule_class=rule_class,
                match_kind=match_kind,
                pattern=str(entry["pattern"]),
                description=str(entry.get("description", "") or ""),
            )
        except PolicyError as e:
            if line is not None:
                e.detail["line"] = line
            raise
        rules.append(rule)

    policy = PolicySet(rules=tuple(rules), version=str(document["version"]))
    logger.info("loaded policy version %s with %d rules", policy.version, len(policy.rules))
    return policy


def load_policy_file(path: Union[str, Path]) -> PolicySet:
    """Load a policy from a UTF-8 file."""
    try:
        source = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise PolicyError("POLICY_PARSE_ERROR", f"cannot read policy file {path}: {e}", {"path": str(path)})
    return load_policy(source)


def default_policy() -> PolicySet:
    """Load the policy shipped with the repository."""
    return load_policy_file(DEFAULT_POLICY_PATH)
