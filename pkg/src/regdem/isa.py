"""Assembly dialect: operands, control annotations, instructions, kernels.

The dialect is a small SASS-like language. Each instruction line carries a
control prefix ``B<wait>:<rb>:<wb>:<yield>:<stall>`` followed by an optional
predicate guard, the opcode, comma-separated operands and a closing ``;``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Union

RZ = 255
NUM_BARRIERS = 6
MAX_STALL = 15

OPCODES = (
    "MOV", "IADD", "IMUL", "SHL", "ISETP", "FADD", "FMUL", "FFMA", "DADD",
    "DMUL", "S2R", "LDG", "STG", "LDS", "STS", "BRA", "EXIT", "NOP",
)
# register operands of these opcodes are aligned 64-bit pairs
WIDE_OPCODES = frozenset({"DADD", "DMUL"})
COMPARISONS = ("LT", "LE", "GT", "GE", "EQ", "NE")
SPECIAL_REGISTERS = ("SR_TID.X", "SR_CTAID.X")
NUM_PREDICATES = 7

GLOBAL_MEMORY = "global-memory"
SHARED_MEMORY = "shared-memory"
FP32 = "fp32"
FP64 = "fp64"
INT = "int"
CONTROL = "control"
OTHER = "other"

OPCODE_CLASS = {
    "LDG": GLOBAL_MEMORY, "STG": GLOBAL_MEMORY,
    "LDS": SHARED_MEMORY, "STS": SHARED_MEMORY,
    "FADD": FP32, "FMUL": FP32, "FFMA": FP32,
    "DADD": FP64, "DMUL": FP64,
    "MOV": INT, "IADD": INT, "IMUL": INT, "SHL": INT, "ISETP": INT,
    "BRA": CONTROL, "EXIT": CONTROL,
    "S2R": OTHER, "NOP": OTHER,
}


class AsmError(ValueError):
    """Malformed assembly source; carries the line and column when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


# --------------------------------------------------------------------------
# operands


@dataclass(frozen=True)
class RegisterRef:
    index: int
    width: int = 1

    def __post_init__(self):
        if not (0 <= self.index <= RZ):
            raise AsmError(f"register index {self.index} out of range")
        if self.width not in (1, 2):
            raise AsmError(f"unsupported register width {self.width}")
        if self.width == 2 and self.index != RZ and self.index % 2:
            raise AsmError(f"64-bit register R{self.index} must be even-numbered")

    @property
    def is_zero(self):
        return self.index == RZ

    @property
    def role(self):
        return "zero" if self.is_zero else "general"

    @property
    def bank(self):
        return self.index % 4

    def words(self):
        """Physical register indices covered, RZ excluded."""
        if self.is_zero:
            return ()
        return tuple(range(self.index, self.index + self.width))

    def __str__(self):
        return "RZ" if self.is_zero else f"R{self.index}"


@dataclass(frozen=True)
class Predicate:
    index: int
    negated: bool = False

    def __str__(self):
        return ("!" if self.negated else "") + f"P{self.index}"


@dataclass(frozen=True)
class Immediate:
    value: int
    hex: bool = False

    def __str__(self):
        if self.hex:
            return ("-" if self.value < 0 else "") + f"0x{abs(self.value):x}"
        return str(self.value)


@dataclass(frozen=True)
class MemoryRef:
    base: RegisterRef
    offset: int = 0

    def __str__(self):
        return f"[{self.base}+0x{self.offset:x}]"


@dataclass(frozen=True)
class SpecialRegister:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class LabelRef:
    name: str

    def __str__(self):
        return self.name


Operand = Union[RegisterRef, Predicate, Immediate, MemoryRef, SpecialRegister, LabelRef]


# --------------------------------------------------------------------------
# control info, instructions, labels


@dataclass(frozen=True)
class ControlInfo:
    stall: int = 1
    read_barrier: Optional[int] = None
    write_barrier: Optional[int] = None
    wait_set: frozenset = frozenset()
    yield_: bool = False

    def __post_init__(self):
        if not (0 <= self.stall <= MAX_STALL):
            raise AsmError(f"stall count {self.stall} outside 0-{MAX_STALL}")
        for b in (self.read_barrier, self.write_barrier, *self.wait_set):
            if b is not None and not (1 <= b <= NUM_BARRIERS):
                raise AsmError(f"barrier index {b} outside 1-{NUM_BARRIERS}")
        if self.read_barrier is not None and self.read_barrier == self.write_barrier:
            raise AsmError("read and write barrier must differ")
        if self.wait_set & {self.read_barrier, self.write_barrier}:
            raise AsmError("instruction waits on a barrier it sets")

    def waiting(self, *barriers):
        extra = {b for b in barriers if b is not None}
        return replace(self, wait_set=self.wait_set | extra)

    def __str__(self):
        mask = "".join(str(b) for b in sorted(self.wait_set)) or "--"
        rb = "-" if self.read_barrier is None else f"R{self.read_barrier}"
        wb = "-" if self.write_barrier is None else f"W{self.write_barrier}"
        y = "Y" if self.yield_ else "-"
        return f"B{mask}:{rb}:{wb}:{y}:{self.stall}"


@dataclass(frozen=True)
class Instruction:
    opcode: str
    operands: tuple = ()
    control: ControlInfo = ControlInfo()
    predicate: Optional[Predicate] = None
    modifier: Optional[str] = None
    line: Optional[int] = field(default=None, compare=False)

    @property
    def mnemonic(self):
        return self.opcode + (f".{self.modifier}" if self.modifier else "")

    @property
    def klass(self):
        return OPCODE_CLASS[self.opcode]

    @property
    def is_jump(self):
        return self.opcode in ("BRA", "EXIT")

    @property
    def is_memory(self):
        return self.klass in (GLOBAL_MEMORY, SHARED_MEMORY)

    @property
    def is_load(self):
        return self.opcode in ("LDG", "LDS")

    @property
    def is_store(self):
        return self.opcode in ("STG", "STS")

    @property
    def has_dest(self):
        return self.opcode not in ("STG", "STS", "BRA", "EXIT", "NOP") and bool(self.operands)

    @property
    def dest(self):
        return self.operands[0] if self.has_dest else None

    @property
    def memory_operand(self):
        for op in self.operands:
            if isinstance(op, MemoryRef):
                return op
        return None

    @property
    def target(self):
        return self.operands[0].name if self.opcode == "BRA" else None

    def registers(self):
        """Every general-register reference, address bases included."""
        for op in self.operands:
            if isinstance(op, RegisterRef):
                if not op.is_zero:
                    yield op
            elif isinstance(op, MemoryRef) and not op.base.is_zero:
                yield op.base

    def read_refs(self):
        for pos, op in enumerate(self.operands):
            if isinstance(op, MemoryRef):
                if not op.base.is_zero:
                    yield op.base
            elif isinstance(op, RegisterRef) and not op.is_zero:
                if pos == 0 and self.has_dest:
                    continue
                yield op

    def write_refs(self):
        d = self.dest
        if isinstance(d, RegisterRef) and not d.is_zero:
            yield d

    # instructions are immutable, so derived sets are computed once

    def reads(self):
        try:
            return self.__dict__["_reads"]
        except KeyError:
            value = frozenset(w for r in self.read_refs() for w in r.words())
            object.__setattr__(self, "_reads", value)
            return value

    def writes(self):
        try:
            return self.__dict__["_writes"]
        except KeyError:
            value = frozenset(w for r in self.write_refs() for w in r.words())
            object.__setattr__(self, "_writes", value)
            return value

    def words(self):
        """Every register word named by the instruction."""
        try:
            return self.__dict__["_words"]
        except KeyError:
            value = frozenset(w for r in self.registers() for w in r.words())
            object.__setattr__(self, "_words", value)
            return value

    def predicate_reads(self):
        out = set()
        if self.predicate is not None:
            out.add(self.predicate.index)
        return out

    def predicate_writes(self):
        d = self.dest
        return {d.index} if isinstance(d, Predicate) else set()

    def with_control(self, **changes):
        return replace(self, control=replace(self.control, **changes))

    def waiting(self, *barriers):
        return replace(self, control=self.control.waiting(*barriers))

    def map_registers(self, fn):
        """Rebuild with every general register passed through ``fn``."""
        def conv(op):
            if isinstance(op, RegisterRef):
                return op if op.is_zero else fn(op)
            if isinstance(op, MemoryRef):
                return op if op.base.is_zero else MemoryRef(fn(op.base), op.offset)
            return op
        return replace(self, operands=tuple(conv(op) for op in self.operands))

    def __str__(self):
        parts = [str(self.control)]
        if self.predicate is not None:
            parts.append(f"@{self.predicate}")
        parts.append(self.mnemonic)
        text = " ".join(parts)
        if self.operands:
            text += " " + ", ".join(str(op) for op in self.operands)
        return text + " ;"


@dataclass(frozen=True)
class Label:
    name: str
    line: Optional[int] = field(default=None, compare=False)

    def __str__(self):
        return f"{self.name}:"


@dataclass
class Kernel:
    name: str
    block_dim: int = 256
    static_shared: int = 0
    dynamic_shared: int = 0
    body: list = field(default_factory=list)

    def __post_init__(self):
        if not (32 <= self.block_dim <= 1024) or self.block_dim % 32:
            raise AsmError(f"block_dim {self.block_dim} must be a multiple of 32 in [32, 1024]")
        if self.static_shared < 0 or self.dynamic_shared < 0:
            raise AsmError("shared memory sizes must be non-negative")

    @property
    def instructions(self):
        return [item for item in self.body if isinstance(item, Instruction)]

    @property
    def labels(self):
        return [item.name for item in self.body if isinstance(item, Label)]

    @property
    def reg_count(self):
        return max((max(inst.words(), default=-1) for inst in self.instructions), default=-1) + 1

    def used_words(self):
        return {w for inst in self.instructions for w in inst.words()}

    def with_body(self, body, **changes):
        return replace(self, body=list(body), **changes)

    def copy(self):
        return replace(self, body=list(self.body))

    def __str__(self):
        return print_kernel(self)


# --------------------------------------------------------------------------
# register groups


def register_groups(kernel):
    """Map each used register word to its unit ``(lead, width)``.

    Words touched by a 64-bit operand form a pair unit led by the even word;
    every other word is a single-word unit.
    """
    pairs = set()
    for inst in kernel.instructions:
        for ref in inst.registers():
            if ref.width == 2:
                pairs.add(ref.index)
    units = {}
    for lead in pairs:
        units[lead] = units[lead + 1] = (lead, 2)
    for w in kernel.used_words():
        units.setdefault(w, (w, 1))
    return units


def unit_words(unit):
    lead, width = unit
    return tuple(range(lead, lead + width))


# --------------------------------------------------------------------------
# latency / throughput table


@dataclass(frozen=True)
class ClassInfo:
    name: str
    throughput: int
    latency: int


DEFAULT_CLASS_TABLE = {
    GLOBAL_MEMORY: ClassInfo(GLOBAL_MEMORY, 128, 200),
    SHARED_MEMORY: ClassInfo(SHARED_MEMORY, 128, 24),
    FP32: ClassInfo(FP32, 128, 6),
    FP64: ClassInfo(FP64, 4, 6),
    INT: ClassInfo(INT, 128, 6),
    CONTROL: ClassInfo(CONTROL, 128, 6),
    OTHER: ClassInfo(OTHER, 128, 6),
}


@dataclass(frozen=True)
class LatencyTable:
    classes: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_TABLE))
    max_throughput: int = 128

    def info(self, klass):
        return self.classes[klass]

    def latency(self, klass):
        return self.classes[klass].latency

    def throughput(self, klass):
        return self.classes[klass].throughput

    def contention(self, klass):
        """Issue slots one instruction of ``klass`` occupies; units at least
        as wide as the scheduler cost one slot."""
        return Fraction(self.max_throughput, min(self.classes[klass].throughput, self.max_throughput))

    def scaled(self, factor):
        """Table with memory latencies multiplied by ``factor``."""
        out = dict(self.classes)
        for k in (GLOBAL_MEMORY, SHARED_MEMORY):
            c = out[k]
            out[k] = ClassInfo(c.name, c.throughput, c.latency * factor)
        return LatencyTable(out, self.max_throughput)

    @property
    def gl_mem_stall(self):
        return self.latency(GLOBAL_MEMORY)

    @property
    def sh_mem_stall(self):
        return self.latency(SHARED_MEMORY)


DEFAULT_LATENCY = LatencyTable()


def instruction_class(inst, table=DEFAULT_LATENCY):
    """Class, throughput (ops/cycle) and latency (cycles) of ``inst``."""
    return table.info(inst.klass)


def is_variable_latency(inst):
    """Memory instructions complete asynchronously and signal through barriers."""
    return inst.is_memory


# --------------------------------------------------------------------------
# parsing

_CONTROL_RE = re.compile(r"B(--|[1-6]+):(-|R[1-6]):(-|W[1-6]):(-|Y):(\d+)$")
_LABEL_RE = re.compile(r"([A-Za-z_.$][\w.$]*):$")
_IDENT_RE = re.compile(r"[A-Za-z_.$][\w.$]*$")
_REG_RE = re.compile(r"R(\d+)$")
_PRED_RE = re.compile(r"P([0-6])$")
_MEM_RE = re.compile(r"\[\s*(RZ|R\d+)\s*(?:\+\s*(0x[0-9a-fA-F]+|\d+)\s*)?\]$")
_IMM_RE = re.compile(r"-?(0x[0-9a-fA-F]+|\d+)$")

# operand kinds per opcode: d=dest reg, p=dest predicate, r=reg, i=reg or imm,
# m=memory, s=special register, l=label
_SIGNATURES = {
    "MOV": "di", "IADD": "dri", "IMUL": "dri", "SHL": "dri", "ISETP": "pri",
    "FADD": "dri", "FMUL": "dri", "FFMA": "drii", "DADD": "drr", "DMUL": "drr",
    "S2R": "ds", "LDG": "dm", "STG": "mr", "LDS": "dm", "STS": "mr",
    "BRA": "l", "EXIT": "", "NOP": "",
}


def _parse_control(text, lineno):
    m = _CONTROL_RE.match(text)
    if not m:
        raise AsmError(f"malformed control annotation {text!r}", lineno, 1)
    mask, rb, wb, y, stall = m.groups()
    waits = set()
    if mask != "--":
        for ch in mask:
            b = int(ch)
            if b in waits:
                raise AsmError(f"barrier {b} listed twice in wait mask", lineno, 1)
            waits.add(b)
    try:
        return ControlInfo(
            stall=int(stall),
            read_barrier=None if rb == "-" else int(rb[1:]),
            write_barrier=None if wb == "-" else int(wb[1:]),
            wait_set=frozenset(waits),
            yield_=(y == "Y"),
        )
    except AsmError as exc:
        raise AsmError(str(exc), lineno, 1) from None


def _parse_int(text):
    neg = text.startswith("-")
    body = text[1:] if neg else text
    value = int(body, 16) if body.lower().startswith("0x") else int(body)
    return -value if neg else value, body.lower().startswith("0x")


def _parse_reg(text, width, lineno, col):
    if text == "RZ":
        return RegisterRef(RZ, 1)
    m = _REG_RE.match(text)
    if not m:
        raise AsmError(f"expected register, got {text!r}", lineno, col)
    idx = int(m.group(1))
    if idx >= RZ:
        raise AsmError(f"register R{idx} out of range", lineno, col)
    if width == 2 and idx % 2:
        raise AsmError(f"64-bit operand R{idx} must be even-numbered", lineno, col)
    return RegisterRef(idx, width)


def _parse_operand(kind, text, width, lineno, col):
    if kind in "dr":
        return _parse_reg(text, width, lineno, col)
    if kind == "i":
        if _IMM_RE.match(text):
            value, is_hex = _parse_int(text)
            return Immediate(value, is_hex)
        return _parse_reg(text, width, lineno, col)
    if kind == "p":
        m = _PRED_RE.match(text)
        if not m:
            raise AsmError(f"expected predicate register, got {text!r}", lineno, col)
        return Predicate(int(m.group(1)))
    if kind == "m":
        m = _MEM_RE.match(text)
        if not m:
            raise AsmError(f"expected memory operand, got {text!r}", lineno, col)
        base = _parse_reg(m.group(1), 1, lineno, col)
        offset = _parse_int(m.group(2))[0] if m.group(2) else 0
        return MemoryRef(base, offset)
    if kind == "s":
        if text not in SPECIAL_REGISTERS:
            raise AsmError(f"unknown special register {text!r}", lineno, col)
        return SpecialRegister(text)
    if kind == "l":
        if not _IDENT_RE.match(text):
            raise AsmError(f"expected label, got {text!r}", lineno, col)
        return LabelRef(text)
    raise AssertionError(kind)


def parse_instruction(line, lineno=None):
    text = line.strip()
    col0 = len(line) - len(line.lstrip()) + 1
    if not text.endswith(";"):
        raise AsmError("instruction must end with ';'", lineno, col0 + len(text))
    text = text[:-1].rstrip()
    head, _, rest = text.partition(" ")
    control = _parse_control(head, lineno)
    rest = rest.strip()
    predicate = None
    if rest.startswith("@"):
        ptext, _, rest = rest.partition(" ")
        neg = ptext.startswith("@!")
        m = _PRED_RE.match(ptext[2:] if neg else ptext[1:])
        if not m:
            raise AsmError(f"malformed predicate guard {ptext!r}", lineno, col0 + len(head) + 1)
        predicate = Predicate(int(m.group(1)), neg)
        rest = rest.strip()
    mnemonic, _, optext = rest.partition(" ")
    opcode, _, modifier = mnemonic.partition(".")
    op_col = col0 + line.strip().find(mnemonic)
    if opcode not in _SIGNATURES:
        raise AsmError(f"unknown opcode {mnemonic!r}", lineno, op_col)
    if opcode == "ISETP":
        if modifier not in COMPARISONS:
            raise AsmError(f"ISETP needs a comparison modifier, got {mnemonic!r}", lineno, op_col)
    elif modifier:
        raise AsmError(f"opcode {opcode} takes no modifier", lineno, op_col)
    sig = _SIGNATURES[opcode]
    raw = [t.strip() for t in optext.split(",")] if optext.strip() else []
    if len(raw) != len(sig):
        raise AsmError(f"{opcode} expects {len(sig)} operands, got {len(raw)}", lineno, op_col)
    width = 2 if opcode in WIDE_OPCODES else 1
    operands = []
    for kind, tok in zip(sig, raw):
        col = col0 + line.strip().find(tok) if tok else None
        operands.append(_parse_operand(kind, tok, width, lineno, col))
    return Instruction(opcode, tuple(operands), control, predicate, modifier or None, lineno)


def parse_kernel(text):
    """Parse one kernel from dialect source."""
    name = None
    block_dim = None
    static_shared = 0
    dynamic_shared = 0
    body = []
    seen_labels = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("."):
            key, _, value = stripped.partition(" ")
            value = value.strip()
            if body:
                raise AsmError(f"directive {key} after instructions", lineno, 1)
            try:
                if key == ".kernel":
                    if not _IDENT_RE.match(value):
                        raise AsmError(f"bad kernel name {value!r}", lineno, 9)
                    name = value
                elif key == ".blockdim":
                    block_dim = int(value)
                elif key == ".shared":
                    static_shared = int(value)
                elif key == ".dynshared":
                    dynamic_shared = int(value)
                else:
                    raise AsmError(f"unknown directive {key}", lineno, 1)
            except ValueError as exc:
                if isinstance(exc, AsmError):
                    raise
                raise AsmError(f"bad value for {key}: {value!r}", lineno, len(key) + 2) from None
            continue
        m = _LABEL_RE.match(stripped)
        if m:
            if m.group(1) in seen_labels:
                raise AsmError(f"duplicate label {m.group(1)}", lineno, 1)
            seen_labels.add(m.group(1))
            body.append(Label(m.group(1), lineno))
            continue
        body.append(parse_instruction(line, lineno))
    if name is None:
        raise AsmError("missing .kernel directive", 1, 1)
    if block_dim is None:
        raise AsmError("missing .blockdim directive", 1, 1)
    for inst in body:
        if isinstance(inst, Instruction) and inst.opcode == "BRA" and inst.target not in seen_labels:
            raise AsmError(f"unresolved branch target {inst.target}", inst.line, None)
    try:
        return Kernel(name, block_dim, static_shared, dynamic_shared, body)
    except AsmError as exc:
        raise AsmError(str(exc), 2, 1) from None


def print_kernel(kernel):
    lines = [f".kernel {kernel.name}", f".blockdim {kernel.block_dim}", f".shared {kernel.static_shared}"]
    if kernel.dynamic_shared:
        lines.append(f".dynshared {kernel.dynamic_shared}")
    for item in kernel.body:
        if isinstance(item, Label):
            lines.append(str(item))
        else:
            lines.append("    " + str(item))
    return "\n".join(lines) + "\n"


def iter_instructions(body) -> Iterator[tuple[int, Instruction]]:
    for pos, item in enumerate(body):
        if isinstance(item, Instruction):
            yield pos, item


def rename(ref, mapping):
    """Rename a register through a word->word map, keeping its width."""
    return RegisterRef(mapping.get(ref.index, ref.index), ref.width)


def format_registers(words: Iterable[int]):
    return ", ".join(f"R{w}" for w in sorted(words))
