"""A reproducible English corpus assembled from the Python installation's own documentation.

Used for desk-scale runs and tests when no external corpus is at hand. The text
is the interpreter's keyword/topic help pages followed by standard-library
docstrings, deduplicated, in a fixed order.
"""

import contextlib
import importlib
import inspect
import io
import sys
import warnings

_SKIP = {"antigravity", "this", "idlelib", "tkinter", "turtle", "turtledemo", "test", "lib2to3",
         "ensurepip", "venv", "pydoc_data", "webbrowser", "msilib", "winreg", "winsound"}


def _topic_pages():
    from pydoc_data.topics import topics

    return [topics[key] for key in sorted(topics)]


def _stdlib_docstrings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name in sorted(sys.stdlib_module_names):
            if name.startswith("_") or name in _SKIP:
                continue
            try:
                with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
                    mod = importlib.import_module(name)
            except Exception:
                continue
            yield inspect.getdoc(mod)
            for attr, obj in sorted(vars(mod).items()):
                if getattr(obj, "__module__", None) == name:
                    yield inspect.getdoc(obj)


def python_docs_documents(min_chars: int = 200) -> list[str]:
    seen = set()
    docs = []
    for doc in [*_topic_pages(), *_stdlib_docstrings()]:
        if doc and len(doc) >= min_chars and doc not in seen:
            seen.add(doc)
            docs.append(doc)
    return docs


def python_docs_text(max_bytes: int = 1_000_000) -> str:
    """Up to ``max_bytes`` UTF-8 bytes of documentation prose, whole documents only."""
    out, size = [], 0
    for doc in python_docs_documents():
        n = len(doc.encode("utf-8")) + 2
        if size + n > max_bytes:
            break
        out.append(doc)
        size += n
    return "\n\n".join(out)
