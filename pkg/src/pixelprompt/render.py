"""Text-to-page rendering with adaptive font-size search.

The pipeline normalizes typography, escapes characters the backend would
misinterpret, typesets the text onto a single page with greedy word
wrapping, rasterizes at ``dpi`` and resizes to the target pixel size.
``render_adaptive`` walks the candidate font sizes from largest to smallest
and keeps the first one whose ink bounding box covers the target fraction
of the page.

Page geometry is expressed in target pixels; one target pixel corresponds
to one PostScript point, so a page is rasterized at ``dpi / 72`` canvas
pixels per target pixel before the final resize.
"""

from __future__ import annotations

import functools
import importlib.util
import io
import re
import shutil
import subprocess
import tempfile
import unicodedata
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from PIL import Image, ImageFont

from .errors import BackendUnavailable, FontUnavailable, InvalidSpec, RenderOverflow

DEFAULT_FONT_CANDIDATES: tuple[float, ...] = tuple(12.0 - 0.5 * i for i in range(15))
DEFAULT_FONT_FAMILY = "DejaVuSerif"
BACKENDS = ("raster", "tex")

_TYPOGRAPHY = str.maketrans(
    {
        "\u2018": "'",
        "\u2019": "'",
        "\u201a": "'",
        "\u201b": "'",
        "\u201c": '"',
        "\u201d": '"',
        "\u201e": '"',
        "\u201f": '"',
        "\u2010": "-",
        "\u2011": "-",
        "\u2012": "-",
        "\u2013": "-",
        "\u2014": "--",
        "\u2015": "--",
        "\u2026": "...",
    }
)

TEX_ESCAPES: dict[str, str] = {
    "\\": r"\textbackslash{}",
    "&": r"\&",
    "%": r"\%",
    "$": r"\$",
    "#": r"\#",
    "_": r"\_",
    "{": r"\{",
    "}": r"\}",
    "~": r"\textasciitilde{}",
    "^": r"\textasciicircum{}",
}
_TEX_TABLE = str.maketrans(TEX_ESCAPES)


@dataclass(frozen=True)
class RenderSpec:
    """Page geometry, density target and font search configuration."""

    width_px: int = 600
    height_px: int = 800
    dpi: int = 300
    margin_px: int = 10
    target_fill_ratio: float = 0.8
    font_candidates: tuple[float, ...] = DEFAULT_FONT_CANDIDATES
    font_family: str = DEFAULT_FONT_FAMILY
    backend: str = "raster"
    line_spacing: float = 1.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "font_candidates", tuple(float(s) for s in self.font_candidates))
        for name in ("width_px", "height_px", "dpi"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise InvalidSpec(f"{name} must be a positive integer, got {value!r}")
        if self.margin_px < 0:
            raise InvalidSpec("margin_px must be non-negative")
        if 2 * self.margin_px >= min(self.width_px, self.height_px):
            raise InvalidSpec("margins leave no printable area")
        if not 0 < self.target_fill_ratio <= 1:
            raise InvalidSpec("target_fill_ratio must lie in (0, 1]")
        sizes = self.font_candidates
        if not sizes:
            raise InvalidSpec("font_candidates must be non-empty")
        if any(s <= 0 for s in sizes) or any(a <= b for a, b in zip(sizes, sizes[1:])):
            raise InvalidSpec("font_candidates must be positive and strictly descending")
        if self.backend not in BACKENDS:
            raise InvalidSpec(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        if self.line_spacing <= 0:
            raise InvalidSpec("line_spacing must be positive")

    @property
    def size(self) -> tuple[int, int]:
        return self.width_px, self.height_px

    def with_size(self, width_px: int, height_px: int) -> RenderSpec:
        return replace(self, width_px=width_px, height_px=height_px)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["font_candidates"] = list(self.font_candidates)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RenderSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidSpec(f"unknown render keys: {sorted(unknown)}")
        return cls(**dict(data))


@dataclass(frozen=True, eq=False)
class RenderedPage:
    image: np.ndarray
    font_size_pt: float
    fill_ratio: float
    overflowed: bool = False
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[0]

    def to_pil(self) -> Image.Image:
        return Image.fromarray(self.image)

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        self.to_pil().save(buf, format="PNG", optimize=False)
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_png())
        return path


def normalize_typography(text: str) -> str:
    """Replace curly quotes, dashes and ellipses with ASCII equivalents.

    En dashes become ``-``, em dashes ``--`` and the ellipsis character
    ``...``; every other character passes through unchanged.
    """
    return text.translate(_TYPOGRAPHY)


def sanitize_for_typesetter(text: str, backend: str = "raster") -> str:
    """Escape characters that the backend would treat as markup.

    The TeX backend replaces its reserved characters in a single pass (so the
    braces introduced by ``\\textbackslash{}`` are never re-escaped). The raster
    backend draws glyphs directly and only drops control characters other
    than newline and tab.
    """
    if backend == "tex":
        text = text.translate(_TEX_TABLE)
    elif backend != "raster":
        raise InvalidSpec(f"unknown backend {backend!r}")
    return "".join(
        ch for ch in text if ch in "\n\t" or unicodedata.category(ch) != "Cc"
    )


def fill_ratio(image: np.ndarray | Image.Image) -> float:
    """Area of the ink bounding box divided by the page area.

    Pixels whose luminance is below half of the dtype's full scale count as
    ink. A blank page yields 0.
    """
    arr = np.asarray(image)
    if arr.size == 0:
        raise ValueError("image is empty")
    if arr.ndim == 3:
        channels = arr[..., :3].astype(np.float64)
        if channels.shape[-1] == 3:
            lum = channels @ np.array([0.299, 0.587, 0.114])
        else:
            lum = channels[..., 0]
    elif arr.ndim == 2:
        lum = arr
    else:
        raise ValueError(f"expected a 2-D or 3-D raster, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        full = float(np.iinfo(arr.dtype).max)
    elif arr.dtype == bool:
        raise ValueError("boolean rasters are ambiguous; pass luminance values")
    else:
        full = 1.0
    ink = lum < 0.5 * full
    rows = np.flatnonzero(ink.any(axis=1))
    if rows.size == 0:
        return 0.0
    cols = np.flatnonzero(ink.any(axis=0))
    box = (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
    return float(box) / float(ink.shape[0] * ink.shape[1])


# -- fonts -------------------------------------------------------------------

def _font_dirs() -> list[Path]:
    dirs = []
    mpl = importlib.util.find_spec("matplotlib")
    if mpl is not None and mpl.origin:
        dirs.append(Path(mpl.origin).parent / "mpl-data" / "fonts" / "ttf")
    dirs += [Path("/usr/share/fonts"), Path("/usr/local/share/fonts"), Path.home() / ".fonts"]
    return [d for d in dirs if d.is_dir()]


@functools.lru_cache(maxsize=None)
def resolve_font(family: str) -> Path:
    """Find a font file for ``family`` (a path or a face file stem)."""
    candidate = Path(family).expanduser()
    if candidate.suffix.lower() in (".ttf", ".otf", ".ttc") and candidate.is_file():
        return candidate
    for directory in _font_dirs():
        for ext in (".ttf", ".otf", ".ttc"):
            hits = sorted(directory.rglob(f"{family}{ext}"))
            if hits:
                return hits[0]
    raise FontUnavailable(f"font {family!r} not found (searched {[str(d) for d in _font_dirs()]})")


class _Face:
    """A font at one pixel size plus per-word width and mask caches."""

    def __init__(self, path: Path, px: float):
        try:
            self.font = ImageFont.truetype(str(path), px)
        except OSError as exc:
            raise FontUnavailable(f"cannot load font {path}: {exc}") from exc
        self.space = self.font.getlength(" ")
        self._widths: dict[str, float] = {}
        self._masks: dict[str, tuple[Image.Image | None, tuple[int, int]]] = {}

    def width(self, word: str) -> float:
        w = self._widths.get(word)
        if w is None:
            w = self._widths[word] = self.font.getlength(word)
        return w

    def mask(self, word: str) -> tuple[Image.Image | None, tuple[int, int]]:
        entry = self._masks.get(word)
        if entry is None:
            core, offset = self.font.getmask2(word, mode="L")
            img = Image.frombytes("L", core.size, bytes(core)) if core.size[0] and core.size[1] else None
            entry = self._masks[word] = (img, offset)
        return entry


@functools.lru_cache(maxsize=256)
def _face(path: Path, px: float) -> _Face:
    return _Face(path, px)


# -- raster backend ----------------------------------------------------------

_WS = re.compile(r"[ \t\r\f\v]+")


@dataclass
class _Layout:
    lines: list[list[str]]
    overflowed: bool
    line_height: float
    origin: float
    face: _Face


def _split_long(word: str, face: _Face, max_width: float) -> list[str]:
    pieces, cur = [], ""
    for ch in word:
        if cur and face.width(cur + ch) > max_width:
            pieces.append(cur)
            cur = ch
        else:
            cur += ch
    if cur:
        pieces.append(cur)
    return pieces


def _layout(text: str, font_size_pt: float, spec: RenderSpec) -> _Layout:
    scale = spec.dpi / 72.0
    face = _face(resolve_font(spec.font_family), font_size_pt * scale)
    margin = spec.margin_px * scale
    max_width = spec.width_px * scale - 2 * margin
    max_height = spec.height_px * scale - 2 * margin
    line_height = font_size_pt * spec.line_spacing * scale
    max_lines = int(max_height // line_height + 1e-9)

    lines: list[list[str]] = []
    overflowed = False
    for paragraph in text.split("\n"):
        cur: list[str] = []
        width = 0.0
        words = [w for w in _WS.split(paragraph) if w]
        for word in words:
            ww = face.width(word)
            if ww > max_width:
                parts = _split_long(word, face, max_width)
            else:
                parts = [word]
            for part in parts:
                pw = face.width(part) if len(parts) > 1 else ww
                needed = pw if not cur else width + face.space + pw
                if needed <= max_width or not cur:
                    cur.append(part)
                    width = needed
                else:
                    lines.append(cur)
                    cur, width = [part], pw
        lines.append(cur)
        if len(lines) > max_lines + 1:
            break
    # trailing blank lines carry no ink
    while lines and not lines[-1]:
        lines.pop()
    if len(lines) > max_lines:
        overflowed = True
        lines = lines[:max_lines]
    return _Layout(lines, overflowed, line_height, margin, face)


def _draw(layout: _Layout, spec: RenderSpec) -> np.ndarray:
    scale = spec.dpi / 72.0
    canvas_size = (round(spec.width_px * scale), round(spec.height_px * scale))
    canvas = Image.new("L", canvas_size, 255)
    face = layout.face
    y = layout.origin
    for words in layout.lines:
        x = layout.origin
        for word in words:
            glyphs, offset = face.mask(word)
            if glyphs is not None:
                canvas.paste(0, (round(x + offset[0]), round(y + offset[1])), mask=glyphs)
            x += face.width(word) + face.space
        y += layout.line_height
    if canvas.size != spec.size:
        canvas = canvas.resize(spec.size, Image.Resampling.LANCZOS)
    arr = np.asarray(canvas).copy()
    arr.flags.writeable = False
    return arr


def _raster_page(text: str, font_size_pt: float, spec: RenderSpec) -> RenderedPage:
    layout = _layout(text, font_size_pt, spec)
    image = _draw(layout, spec)
    return RenderedPage(image, font_size_pt, fill_ratio(image), layout.overflowed)


# -- TeX backend ---------------------------------------------------------------

_PAGE_OBJ = re.compile(rb"/Type\s*/Page(?!s)")


def build_latex_template(text: str, font_size_pt: float, spec: RenderSpec) -> str:
    """Minimal single-page LaTeX document for already-escaped ``text``."""
    body = "\n\\par\n".join(text.split("\n"))
    lead = font_size_pt * spec.line_spacing
    return (
        "\\documentclass{article}\n"
        f"\\usepackage[paperwidth={spec.width_px}bp,paperheight={spec.height_px}bp,"
        f"margin={spec.margin_px}bp]{{geometry}}\n"
        "\\usepackage[T1]{fontenc}\n"
        "\\usepackage{lmodern}\n"
        "\\usepackage{anyfontsize}\n"
        "\\pagestyle{empty}\n"
        "\\setlength{\\parindent}{0pt}\n"
        "\\begin{document}\n"
        f"\\fontsize{{{font_size_pt:g}}}{{{lead:g}}}\\selectfont\n"
        f"{body}\n"
        "\\end{document}\n"
    )


def _tex_page(text: str, font_size_pt: float, spec: RenderSpec) -> RenderedPage:
    engine = shutil.which("tectonic") or shutil.which("pdflatex")
    rasterizer = shutil.which("pdftoppm")
    if engine is None or rasterizer is None:
        raise BackendUnavailable("tex backend needs tectonic or pdflatex plus pdftoppm on PATH")
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "page.tex"
        src.write_text(build_latex_template(text, font_size_pt, spec), encoding="utf-8")
        cmd = [engine, str(src)] if engine.endswith("tectonic") else [
            engine, "-interaction=nonstopmode", "-halt-on-error", "-output-directory", tmp, str(src)]
        proc = subprocess.run(cmd, cwd=tmp, capture_output=True, text=True)
        pdf = Path(tmp) / "page.pdf"
        if proc.returncode != 0 or not pdf.exists():
            raise BackendUnavailable(f"TeX compilation failed: {proc.stdout[-500:]}{proc.stderr[-500:]}")
        pages = len(_PAGE_OBJ.findall(pdf.read_bytes()))
        subprocess.run([rasterizer, "-r", str(spec.dpi), "-png", "-gray", "-singlefile",
                        "-f", "1", "-l", "1", str(pdf), str(Path(tmp) / "page")], check=True)
        with Image.open(Path(tmp) / "page.png") as img:
            page = img.convert("L").resize(spec.size, Image.Resampling.LANCZOS)
    arr = np.asarray(page).copy()
    arr.flags.writeable = False
    return RenderedPage(arr, font_size_pt, fill_ratio(arr), pages > 1)


# -- public entry points -------------------------------------------------------

def typeset_page(text: str, font_size_pt: float, spec: RenderSpec) -> RenderedPage:
    """Typeset sanitized ``text`` at one font size onto a single page.

    Raises:
        FontUnavailable: the configured font cannot be loaded.
        BackendUnavailable: the TeX backend's tools are missing.
    """
    if font_size_pt <= 0:
        raise ValueError("font_size_pt must be positive")
    if spec.backend == "tex":
        return _tex_page(text, font_size_pt, spec)
    return _raster_page(text, font_size_pt, spec)


def prepare_text(text: str, backend: str = "raster") -> str:
    return sanitize_for_typesetter(normalize_typography(text), backend)


def render_adaptive(text: str, spec: RenderSpec) -> RenderedPage:
    """Render ``text`` at the largest candidate size meeting the fill target.

    Sizes that overflow the page are skipped. When no fitting size reaches
    ``spec.target_fill_ratio`` the fitting size with the highest fill ratio is
    returned instead.

    Raises:
        RenderOverflow: the text overflows at every candidate size.
        ValueError: the text is empty after normalization.
    """
    prepared = prepare_text(text, spec.backend)
    if not prepared.strip():
        raise ValueError("nothing to render: text is empty after normalization")
    best: RenderedPage | None = None
    for size in spec.font_candidates:
        if spec.backend == "raster":
            layout = _layout(prepared, size, spec)
            if layout.overflowed:
                continue
            image = _draw(layout, spec)
            page = RenderedPage(image, size, fill_ratio(image), False)
        else:
            page = typeset_page(prepared, size, spec)
            if page.overflowed:
                continue
        if best is None or page.fill_ratio > best.fill_ratio:
            best = page
        if page.fill_ratio >= spec.target_fill_ratio:
            break
    if best is None:
        raise RenderOverflow(
            f"text overflows a {spec.width_px}x{spec.height_px} page at every candidate "
            f"size down to {spec.font_candidates[-1]:g}pt"
        )
    return best
