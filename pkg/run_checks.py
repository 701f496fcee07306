#!/usr/bin/env python3
"""
Plain runner behind each test module's ``python test_x.py`` entry point.

Calls every ``test_*`` function of a module and prints a PASS/FAIL table.
Functions taking ``tmp_path`` get a fresh temporary directory. Parametrized
functions run once per parameter set. Functions whose ``skipif`` condition
holds are reported as SKIP.
"""
import tempfile
from pathlib import Path


def _marks(func, name):
    return [m for m in getattr(func, 'pytestmark', []) if m.name == name]


def _skipped(func):
    return any(m.args and m.args[0] for m in _marks(func, 'skipif'))


def _calls(func):
    """Yield (suffix, kwargs) for each invocation of a test function."""
    argnames = func.__code__.co_varnames[:func.__code__.co_argcount]
    cases = [('', {})]
    for mark in _marks(func, 'parametrize'):
        names = [n.strip() for n in mark.args[0].split(',')] if isinstance(mark.args[0], str) else list(mark.args[0])
        expanded = []
        for suffix, kwargs in cases:
            for k, values in enumerate(mark.args[1]):
                values = values if len(names) > 1 else (values,)
                expanded.append((f'{suffix}[{k}]', {**kwargs, **dict(zip(names, values))}))
        cases = expanded
    for suffix, kwargs in cases:
        if 'tmp_path' in argnames:
            kwargs = {**kwargs, 'tmp_path': Path(tempfile.mkdtemp())}
        yield suffix, kwargs


def run_tests(title, namespace):
    """Run the ``test_*`` callables in ``namespace``; return a process exit code."""
    print(title)
    print("=" * 40)
    tests = [(name, func) for name, func in namespace.items() if name.startswith('test_') and callable(func)]
    results = []
    for name, func in tests:
        if _skipped(func):
            results.append((name, None))
            continue
        for suffix, kwargs in _calls(func):
            try:
                func(**kwargs)
                results.append((name + suffix, True))
            except Exception as e:
                print(f"✗ {name}{suffix}: {type(e).__name__}: {e}")
                results.append((name + suffix, False))
    print("\nTest Results:")
    for name, ok in results:
        print(f"{name}: {'SKIP' if ok is None else 'PASS' if ok else 'FAIL'}")
    failed = sum(1 for _, ok in results if ok is False)
    print(f"\n{'🎉 All tests passed!' if not failed else f'❌ {failed} test(s) failed.'}")
    return 1 if failed else 0
