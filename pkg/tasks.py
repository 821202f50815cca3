from pathlib import Path

from invoke import Context, task

ROOT = Path(__file__).parent.resolve()
STEPS = ['synth', 'train', 'attribute', 'evaluate', 'report']


@task
def build(ctx: Context):
    with ctx.cd(ROOT):
        ctx.run('rm -rf dist')
        ctx.run('poetry build --format sdist')
        ctx.run('poetry export --without-hashes -f requirements.txt -o dist/requirements.txt')


@task
def bench(ctx: Context, config='configs/marker_bias.json', out=None, methods=None, seed=None):
    """
    Runs all steps for a single scenario config.
    Steps are run in order, and the first failure stops the run.
    """
    args = f'--config {config}'
    if out:
        args += f' --out {out}'
    if methods:
        args += f' --methods {methods}'
    if seed is not None:
        args += f' --seed {seed}'

    with ctx.cd(ROOT):
        for step in STEPS:
            ctx.run(f'poetry run biasbench {step} {args}')


@task
def clean(ctx: Context, out='artifacts'):
    """Removes all generated artifacts."""
    with ctx.cd(ROOT):
        ctx.run(f'rm -rf {out}')
